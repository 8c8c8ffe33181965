"""Observation and estimate containers shared by every pipeline stage.

Keypoint ids pool the human joints ``[0, J)`` with the two stick endpoints
``J`` and ``J + 1``.  Masked-out 2D entries hold NaN and are never read.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import Intrinsics, Pose


# Head and ankle keypoints of the 17-joint body layout (nose, left/right ankle).
HEAD_JOINT = 0
FOOT_JOINTS = (15, 16)


@dataclass(frozen=True)
class StickSpec:
    length_m: float
    label: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.length_m) and self.length_m > 0):
            raise ValueError(f"stick length must be positive and finite, got {self.length_m}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ObservationSet:
    human_2d: np.ndarray  # (C, F, J, 2)
    stick_2d: np.ndarray  # (C, F, 2, 2)
    human_mask: np.ndarray  # (C, F, J) bool
    stick_mask: np.ndarray  # (C, F, 2) bool
    intrinsics: tuple[Intrinsics, ...]

    def __post_init__(self):
        hm = np.array(self.human_mask, dtype=bool)
        sm = np.array(self.stick_mask, dtype=bool)
        h2 = np.array(self.human_2d, dtype=float).reshape(hm.shape + (2,))
        s2 = np.array(self.stick_2d, dtype=float).reshape(sm.shape + (2,))
        if hm.ndim != 3 or sm.shape[:2] != hm.shape[:2] or sm.shape[2] != 2:
            raise ValueError("inconsistent observation shapes")
        if hm.shape[0] < 2:
            raise ValueError("need at least two cameras")
        if len(self.intrinsics) != hm.shape[0]:
            raise ValueError("one Intrinsics per camera required")
        h2[~hm] = np.nan
        s2[~sm] = np.nan
        for name, val in (("human_2d", h2), ("stick_2d", s2), ("human_mask", hm), ("stick_mask", sm)):
            object.__setattr__(self, name, _readonly(val))
        object.__setattr__(self, "intrinsics", tuple(self.intrinsics))

    @property
    def num_cameras(self) -> int:
        return self.human_mask.shape[0]

    @property
    def num_frames(self) -> int:
        return self.human_mask.shape[1]

    @property
    def num_joints(self) -> int:
        return self.human_mask.shape[2]

    @property
    def keypoints_2d(self) -> np.ndarray:
        """(C, F, J + 2, 2) pooled human joints followed by stick endpoints."""
        return np.concatenate([self.human_2d, self.stick_2d], axis=2)

    @property
    def masks(self) -> np.ndarray:
        """(C, F, J + 2) pooled visibility."""
        return np.concatenate([self.human_mask, self.stick_mask], axis=2)

    def without_stick(self) -> "ObservationSet":
        return ObservationSet(
            self.human_2d, np.full_like(self.stick_2d, np.nan), self.human_mask,
            np.zeros_like(self.stick_mask), self.intrinsics,
        )

    def without_human(self) -> "ObservationSet":
        C, F, _ = self.human_mask.shape
        return ObservationSet(
            np.zeros((C, F, 0, 2)), self.stick_2d, np.zeros((C, F, 0), dtype=bool),
            self.stick_mask, self.intrinsics,
        )


@dataclass(frozen=True, eq=False)
class SceneEstimate:
    """3D trajectories; NaN rows mark absent points."""

    human_3d: np.ndarray  # (F, J, 3)
    stick_3d: np.ndarray  # (F, 2, 3)

    def __post_init__(self):
        h = np.array(self.human_3d, dtype=float)
        s = np.array(self.stick_3d, dtype=float)
        object.__setattr__(self, "human_3d", _readonly(h))
        object.__setattr__(self, "stick_3d", _readonly(s))

    @classmethod
    def from_points(cls, points: np.ndarray, num_joints: int) -> "SceneEstimate":
        """Split pooled (F, J + 2, 3) points."""
        return cls(points[:, :num_joints], points[:, num_joints:])

    @property
    def points(self) -> np.ndarray:
        return np.concatenate([self.human_3d, self.stick_3d], axis=1)

    @property
    def present(self) -> np.ndarray:
        """(F, J + 2) bool."""
        return np.all(np.isfinite(self.points), axis=2)

    def scaled(self, s: float) -> "SceneEstimate":
        return SceneEstimate(s * self.human_3d, s * self.stick_3d)


@dataclass(frozen=True)
class CameraRig:
    poses: tuple[Pose, ...]
    intrinsics: tuple[Intrinsics, ...]

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "intrinsics", tuple(self.intrinsics))
        if len(self.poses) != len(self.intrinsics):
            raise ValueError("poses and intrinsics differ in length")
        p0 = self.poses[0]
        if not (np.array_equal(p0.R, np.eye(3)) and np.array_equal(p0.t, np.zeros(3))):
            raise ValueError("camera 0 must be the identity pose (gauge)")

    @property
    def num_cameras(self) -> int:
        return len(self.poses)

    def scaled(self, s: float) -> "CameraRig":
        return CameraRig(tuple(p.scaled(s) for p in self.poses), self.intrinsics)

    def projection_matrices(self) -> np.ndarray:
        """(C, 3, 4) normalized-coordinate projection matrices ``[R | t]``."""
        return np.stack([np.hstack([p.R, p.t[:, None]]) for p in self.poses])

    @classmethod
    def gauge_fixed(cls, poses: Sequence[Pose], intrinsics) -> "CameraRig":
        """Re-express arbitrary world-to-camera poses so camera 0 is the identity."""
        inv0 = poses[0].inverse()
        new = [Pose.identity()] + [p.compose(inv0) for p in poses[1:]]
        return cls(tuple(new), tuple(intrinsics))


class Diagnostic(NamedTuple):
    severity: str  # "warning" | "error"
    code: str
    message: str


def validate(obs: ObservationSet, min_shared: int = 1) -> list[Diagnostic]:
    """Report unreconstructable keypoints, disconnected overlap and bad values."""
    out: list[Diagnostic] = []
    kp = obs.keypoints_2d
    masks = obs.masks
    bad = masks & ~np.all(np.isfinite(kp), axis=3)
    if bad.any():
        c, f, k = np.argwhere(bad)[0]
        out.append(Diagnostic("error", "non-finite", f"{int(bad.sum())} visible entries are non-finite (first: cam {c}, frame {f}, keypoint {k})"))

    views = masks.sum(axis=0)  # (F, K)
    J = obs.num_joints
    for k in range(masks.shape[2]):
        if masks[:, :, k].any() and not (views[:, k] >= 2).any():
            name = f"joint {k}" if k < J else f"stick endpoint {k - J}"
            out.append(Diagnostic("warning", "unreconstructable", f"{name} is never visible in 2 or more cameras"))

    C = obs.num_cameras
    flat = masks.reshape(C, -1).astype(np.int64)
    shared = flat @ flat.T
    adj = shared >= min_shared
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i]):
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    if len(seen) < C:
        missing = sorted(set(range(C)) - seen)
        out.append(Diagnostic("error", "disconnected", f"overlap graph is disconnected; cameras {missing} share no keypoints with camera 0"))
    return out


class Correspondence(NamedTuple):
    frame: int
    keypoint: int
    x_i: np.ndarray
    x_j: np.ndarray


def shared_correspondences(obs: ObservationSet, cam_i: int, cam_j: int) -> list[Correspondence]:
    """All (frame, keypoint) cells visible in both cameras, human and stick pooled."""
    if cam_i == cam_j:
        raise ValueError("cam_i and cam_j must differ")
    kp = obs.keypoints_2d
    both = obs.masks[cam_i] & obs.masks[cam_j]
    return [Correspondence(int(f), int(k), kp[cam_i, f, k], kp[cam_j, f, k]) for f, k in np.argwhere(both)]


def shared_arrays(obs: ObservationSet, cam_i: int, cam_j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array form of :func:`shared_correspondences`: (ids (N, 2), x_i (N, 2), x_j (N, 2))."""
    kp = obs.keypoints_2d
    both = obs.masks[cam_i] & obs.masks[cam_j]
    ids = np.argwhere(both)
    return ids, kp[cam_i][both], kp[cam_j][both]
