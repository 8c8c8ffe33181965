"""Pinhole cameras, rigid poses and the analytic projection Jacobians.

Conventions: a pose (R, t) maps world to camera, ``x_cam = R @ x_world + t``.
Rotation perturbations are applied on the left, ``R <- exp([w]x) R``, and
translation perturbations are additive, ``t <- t + dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEPTH_EPS = 1e-8
_SMALL_ANGLE = 1e-8


class DepthNonPositive(ValueError):
    """A point lies at or behind the camera plane."""


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; works on (..., 3) arrays."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def exp_so3(omega) -> np.ndarray:
    """Rodrigues exponential of a rotation vector."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    W = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def log_so3(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_so3` on the principal branch (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        # R ~ I + [w]x + O(w^2)
        return 0.5 * vee
    if np.pi - theta < 1e-4:
        # sin(theta) ~ 0: recover the axis from the symmetric part
        S = 0.5 * (R + R.T) - cos_theta * np.eye(3)
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
        if vee @ axis < 0:
            axis = -axis
        axis /= np.linalg.norm(axis)
        # refine the angle using the antisymmetric part where it is informative
        sin_theta = 0.5 * vee @ axis
        theta = float(np.arctan2(sin_theta, cos_theta))
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "skew": self.skew}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), float(d.get("skew", 0.0)))


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose has non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a rotation matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, ``-R^T t``."""
        return -self.R.T @ self.t

    def apply(self, P: np.ndarray) -> np.ndarray:
        """Transform world points (..., 3) into the camera frame."""
        return np.asarray(P, dtype=float) @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """``self o other``: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def perturbed(self, delta) -> "Pose":
        """Apply a 6-vector ``(omega, dt)`` with the left-multiplicative convention."""
        delta = np.asarray(delta, dtype=float)
        return Pose(orthonormalize(exp_so3(delta[:3]) @ self.R), self.t + delta[3:])

    def scaled(self, s: float) -> "Pose":
        return Pose(self.R, s * self.t)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t))

    def __hash__(self):
        return hash((self.R.tobytes(), self.t.tobytes()))


def _camera_point(pose: Pose, P) -> np.ndarray:
    q = pose.apply(P)
    if q[2] <= DEPTH_EPS:
        raise DepthNonPositive(f"depth {q[2]:.3g} <= {DEPTH_EPS}")
    return q


def _proj_from_cam(K: Intrinsics, q: np.ndarray) -> np.ndarray:
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    u = (K.fx * x + K.skew * y) / z + K.cx
    v = K.fy * y / z + K.cy
    return np.stack([u, v], axis=-1)


def _dproj_dcam(K: Intrinsics, q: np.ndarray) -> np.ndarray:
    """(..., 2, 3) derivative of pixel coordinates w.r.t. camera-frame point."""
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    iz = 1.0 / z
    out = np.zeros(q.shape[:-1] + (2, 3))
    out[..., 0, 0] = K.fx * iz
    out[..., 0, 1] = K.skew * iz
    out[..., 0, 2] = -(K.fx * x + K.skew * y) * iz * iz
    out[..., 1, 1] = K.fy * iz
    out[..., 1, 2] = -K.fy * y * iz * iz
    return out


def project(K: Intrinsics, pose: Pose, P) -> np.ndarray:
    """Pixel coordinates of a world point."""
    return _proj_from_cam(K, _camera_point(pose, P))


def project_jacobian_point(K: Intrinsics, pose: Pose, P) -> np.ndarray:
    """2x3 derivative of :func:`project` w.r.t. the world point."""
    q = _camera_point(pose, P)
    return _dproj_dcam(K, q) @ pose.R


def project_jacobian_pose(K: Intrinsics, pose: Pose, P) -> np.ndarray:
    """2x6 derivative of :func:`project` w.r.t. ``(omega, dt)``.

    Under ``R <- exp([w]x) R`` the camera point moves by ``w x (R P)``, so
    ``d q / d w = -[R P]x`` and ``d q / d dt = I``.
    """
    q = _camera_point(pose, P)
    D = _dproj_dcam(K, q)
    RP = pose.R @ np.asarray(P, dtype=float)
    return np.hstack([-D @ skew(RP), D])


def project_batch(K: Intrinsics, pose: Pose, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) points; returns (pixels, camera-frame points).

    Depth is not checked here; callers decide how to treat points behind the camera.
    """
    q = pose.apply(P)
    return _proj_from_cam(K, q), q


def project_with_jacobians(
    K: np.ndarray, R: np.ndarray, t: np.ndarray, P: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-observation projection and Jacobians, fully vectorized.

    ``K`` is (N, 5) rows of ``(fx, fy, cx, cy, skew)``, ``R`` (N, 3, 3), ``t`` (N, 3)
    and ``P`` (N, 3).  Returns pixels (N, 2), d pixel / d P (N, 2, 3),
    d pixel / d (omega, dt) (N, 2, 6) and the camera depths (N,).
    """
    RP = np.einsum("nij,nj->ni", R, P)
    q = RP + t
    fx, fy, cx, cy, s = K.T
    x, y, z = q.T
    iz = 1.0 / z
    uv = np.stack([(fx * x + s * y) * iz + cx, fy * y * iz + cy], axis=1)
    D = np.zeros((len(P), 2, 3))
    D[:, 0, 0] = fx * iz
    D[:, 0, 1] = s * iz
    D[:, 0, 2] = -(fx * x + s * y) * iz * iz
    D[:, 1, 1] = fy * iz
    D[:, 1, 2] = -fy * y * iz * iz
    J_point = D @ R
    J_pose = np.concatenate([-D @ skew(RP), D], axis=2)
    return uv, J_point, J_pose, z
