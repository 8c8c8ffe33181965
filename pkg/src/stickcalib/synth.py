"""Synthetic multi-camera scenes of a person swinging a rigid stick.

The character is a 17-joint kinematic skeleton (COCO joint order) walking
uniformly across the capture volume while swinging a sport-specific
implement.  Ground truth is exact; 2D observations are projections plus
optional i.i.d. Gaussian pixel noise and Bernoulli occlusion.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dataset as dsio
from .geometry import Intrinsics, Pose
from .scene import CameraRig, ObservationSet, SceneEstimate, StickSpec

log = logging.getLogger(__name__)

# Regulation-derived implement lengths in meters.  Baseball uses the 0.86 m
# bat; the others are typical adult regulation sizes.
STICK_LENGTHS = {
    "baseball": 0.86,
    "golf": 1.12,
    "hockey": 1.50,
    "kendo": 1.18,
}
SPORTS = tuple(sorted(STICK_LENGTHS))

JOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
NUM_JOINTS = len(JOINT_NAMES)

VOLUME_CENTER = np.array([0.0, 0.0, 1.0])


class InvalidSpec(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    sport: str = "baseball"
    num_cameras: int = 5
    layout: str = "semi_spherical"  # or "random"
    radius_m: float = 4.0
    random_bounds: tuple[float, float, float, float] = (3.0, 6.0, 0.5, 3.0)  # r_min, r_max, h_min, h_max
    num_frames: int = 120
    noise_sigma_px: float = 0.0
    occlusion_rate: float = 0.0
    seed: int = 0
    image_size: tuple[int, int] = (1920, 1080)
    focal_px: float = 1000.0

    def validate(self) -> None:
        if self.sport not in STICK_LENGTHS:
            raise InvalidSpec(f"unknown sport {self.sport!r}; choose from {SPORTS}")
        if not 3 <= self.num_cameras <= 10:
            raise InvalidSpec(f"num_cameras must be in 3..10, got {self.num_cameras}")
        if self.layout not in ("semi_spherical", "random"):
            raise InvalidSpec(f"unknown layout {self.layout!r}")
        if self.num_frames < 3:
            raise InvalidSpec("need at least 3 frames")
        if self.noise_sigma_px < 0:
            raise InvalidSpec("noise_sigma_px must be >= 0")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise InvalidSpec("occlusion_rate must be in [0, 1]")
        if self.radius_m <= 0:
            raise InvalidSpec("radius_m must be positive")
        r0, r1, h0, h1 = self.random_bounds
        if not (0 < r0 <= r1 and h0 <= h1):
            raise InvalidSpec("random_bounds must be (r_min, r_max, h_min, h_max) with 0 < r_min <= r_max")


@dataclass(frozen=True)
class GroundTruthScene:
    spec: SceneSpec
    rig_gt: CameraRig
    human_3d_gt: np.ndarray  # (F, J, 3), gauge frame
    stick_3d_gt: np.ndarray  # (F, 2, 3), gauge frame
    obs: ObservationSet
    stick: StickSpec
    standing_height_m: float
    volume_center: np.ndarray  # gauge frame

    @property
    def scene_gt(self) -> SceneEstimate:
        return SceneEstimate(self.human_3d_gt, self.stick_3d_gt)

    def to_dataset(self) -> dsio.Dataset:
        return dsio.Dataset(self.obs, self.stick, self.rig_gt, self.scene_gt)


# --------------------------------------------------------------------------
# character motion


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sport_swing(sport: str, phi: np.ndarray, fwd, left, up, rng) -> np.ndarray:
    """Unit stick direction (F, 3) for each frame."""
    phase = rng.uniform(0, 2 * np.pi)
    w = 2 * np.pi * phi
    if sport == "golf":
        # pendulum in the frontal plane, club pointing down
        a, b = -up, left
        ang = 0.9 * np.sin(w + phase)
    elif sport == "baseball":
        # near-horizontal sweep around the body
        a, b = _unit(fwd + 0.4 * up), left
        ang = 1.0 * np.sin(w + phase)
    elif sport == "hockey":
        # low side-to-side sweep
        a, b = _unit(fwd - 1.2 * up), left
        ang = 0.7 * np.sin(w + phase)
    else:  # kendo: raise and strike, drifting slightly off the sagittal plane
        a, b = _unit(fwd + 0.2 * up), up
        ang = 0.5 + 0.5 * np.sin(w + phase)
        off = 0.25 * np.sin(2 * w + phase)[:, None]
        ang = ang[:, None]
        return _unit(np.cos(ang) * a + np.sin(ang) * b + off * left)
    ang = ang[:, None]
    return np.cos(ang) * a + np.sin(ang) * b


def character_motion(sport: str, num_frames: int, rng: np.random.Generator):
    """Joint trajectories (F, 17, 3), stick endpoints (F, 2, 3) and standing height, world frame (z up)."""
    F = num_frames
    L = STICK_LENGTHS[sport]
    phi = np.linspace(0.0, 1.0, F)
    heading = rng.uniform(0, 2 * np.pi)
    fwd = np.array([np.cos(heading), np.sin(heading), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    left = np.cross(up, fwd)
    span = rng.uniform(1.8, 2.6)

    hip_h, thigh, shin = 0.92, 0.45, 0.45
    bob = 0.015 * (1 - np.cos(2 * np.pi * phi))
    pelvis = (VOLUME_CENTER[None] - 0.08 * up) + ((phi - 0.5) * span)[:, None] * fwd
    pelvis[:, 2] = hip_h - bob

    gait_phase = rng.uniform(0, 2 * np.pi)
    gait = 0.18 * np.sin(2 * np.pi * 1.5 * phi + gait_phase)
    # lateral weight shift, one sway per stride
    pelvis += (0.03 * np.sin(np.pi * 1.5 * phi + gait_phase))[:, None] * left
    bend = 0.1 + 0.15 * (1 - np.cos(2 * np.pi * phi))

    J = np.zeros((F, NUM_JOINTS, 3))
    neck = pelvis + 0.55 * up
    J[:, 0] = neck + 0.2 * up + 0.08 * fwd
    J[:, 1] = J[:, 0] + 0.03 * up + 0.035 * left - 0.02 * fwd
    J[:, 2] = J[:, 0] + 0.03 * up - 0.035 * left - 0.02 * fwd
    J[:, 3] = J[:, 0] + 0.01 * up + 0.075 * left - 0.09 * fwd
    J[:, 4] = J[:, 0] + 0.01 * up - 0.075 * left - 0.09 * fwd
    J[:, 5] = neck + 0.18 * left - 0.02 * up
    J[:, 6] = neck - 0.18 * left - 0.02 * up

    for side, (hip_i, knee_i, ank_i, sgn) in enumerate(((11, 13, 15, 1.0), (12, 14, 16, -1.0))):
        hip = pelvis + sgn * 0.1 * left
        beta = sgn * gait
        thigh_dir = -np.cos(beta)[:, None] * up + np.sin(beta)[:, None] * fwd
        shin_ang = beta - bend
        shin_dir = -np.cos(shin_ang)[:, None] * up + np.sin(shin_ang)[:, None] * fwd
        J[:, hip_i] = hip
        J[:, knee_i] = hip + thigh * thigh_dir
        J[:, ank_i] = J[:, knee_i] + shin * shin_dir

    d = _sport_swing(sport, phi, fwd, left, up, rng)
    shoulders = 0.5 * (J[:, 5] + J[:, 6])
    grip = shoulders - 0.3 * up + 0.3 * fwd + 0.15 * d
    J[:, 9] = grip + 0.04 * d + 0.03 * left
    J[:, 10] = grip - 0.04 * d - 0.03 * left
    J[:, 7] = 0.5 * (J[:, 5] + J[:, 9]) - 0.06 * up + 0.06 * left
    J[:, 8] = 0.5 * (J[:, 6] + J[:, 10]) - 0.06 * up - 0.06 * left

    X0 = grip - 0.08 * d
    stick = np.stack([X0, X0 + L * d], axis=1)

    # nose to ankle-midpoint distance in the neutral stance (no gait, minimal knee bend)
    standing = np.hypot(0.08 + shin * np.sin(0.1), 0.55 + 0.2 + thigh + shin * np.cos(0.1))
    return J, stick, float(standing)


# --------------------------------------------------------------------------
# cameras


def look_at(center: np.ndarray, target: np.ndarray, roll: float = 0.0) -> Pose:
    """World-to-camera pose for a camera at ``center`` looking at ``target`` (z up world)."""
    z = _unit(target - center)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x = _unit(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    if roll:
        c, s = np.cos(roll), np.sin(roll)
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]) @ R
    return Pose(R, -R @ center)


def camera_centers(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    C = spec.num_cameras
    if spec.layout == "semi_spherical":
        az0 = rng.uniform(0, 2 * np.pi)
        az = az0 + 2 * np.pi * np.arange(C) / C + rng.uniform(-0.15, 0.15, C)
        el = rng.uniform(np.deg2rad(8), np.deg2rad(35), C)
        dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
        return VOLUME_CENTER + spec.radius_m * dirs
    r0, r1, h0, h1 = spec.random_bounds
    az = rng.uniform(0, 2 * np.pi, C)
    r = rng.uniform(r0, r1, C)
    h = rng.uniform(h0, h1, C)
    return np.stack([r * np.cos(az), r * np.sin(az), h], axis=1)


# --------------------------------------------------------------------------


def _gauge(poses: list[Pose], pts: np.ndarray) -> tuple[list[Pose], np.ndarray]:
    """Re-express poses and world points in camera 0's frame."""
    p0 = poses[0]
    inv0 = p0.inverse()
    new = [Pose.identity()] + [p.compose(inv0) for p in poses[1:]]
    return new, p0.apply(pts)


def generate(spec: SceneSpec) -> GroundTruthScene:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    F, C = spec.num_frames, spec.num_cameras
    human_w, stick_w, standing = character_motion(spec.sport, F, rng)

    centers = camera_centers(spec, rng)
    targets = VOLUME_CENTER + rng.uniform(-0.15, 0.15, (C, 3))
    rolls = rng.uniform(-0.05, 0.05, C)
    poses_w = [look_at(c, tg, r) for c, tg, r in zip(centers, targets, rolls)]
    W, H = spec.image_size
    intr = tuple(Intrinsics(spec.focal_px, spec.focal_px, W / 2.0, H / 2.0) for _ in range(C))

    # express everything in camera 0's frame so the ground truth satisfies the gauge
    pts_w = np.concatenate([human_w, stick_w], axis=1)  # (F, K, 3)
    poses, pts = _gauge(poses_w, pts_w.reshape(-1, 3))
    pts = pts.reshape(pts_w.shape)
    # exact length is a construction invariant; recompute endpoint 1 from the
    # transformed direction to avoid drift from the frame change
    d = pts[:, NUM_JOINTS + 1] - pts[:, NUM_JOINTS]
    L = STICK_LENGTHS[spec.sport]
    pts[:, NUM_JOINTS + 1] = pts[:, NUM_JOINTS] + L * d / np.linalg.norm(d, axis=1, keepdims=True)
    center = poses_w[0].apply(VOLUME_CENTER)

    K = pts.shape[1]
    uv = np.empty((C, F, K, 2))
    vis = np.empty((C, F, K), dtype=bool)
    for i, (pose, k) in enumerate(zip(poses, intr)):
        q = pose.apply(pts)
        z = q[..., 2]
        zs = np.where(z > 1e-6, z, 1.0)
        u = (k.fx * q[..., 0] + k.skew * q[..., 1]) / zs + k.cx
        v = k.fy * q[..., 1] / zs + k.cy
        uv[i, ..., 0], uv[i, ..., 1] = u, v
        vis[i] = (z > 1e-6) & (u >= 0) & (u < W) & (v >= 0) & (v < H)

    if spec.occlusion_rate > 0:
        vis &= rng.random(vis.shape) >= spec.occlusion_rate
    if spec.noise_sigma_px > 0:
        uv = uv + rng.normal(0.0, spec.noise_sigma_px, uv.shape)

    frac = vis.any(axis=2).mean(axis=1)
    for i in np.flatnonzero(frac < 0.5):
        log.warning("camera %d sees the subject in only %.0f%% of frames", i, 100 * frac[i])

    obs = ObservationSet(uv[:, :, :NUM_JOINTS], uv[:, :, NUM_JOINTS:], vis[:, :, :NUM_JOINTS], vis[:, :, NUM_JOINTS:], intr)
    rig = CameraRig(tuple(poses), intr)
    return GroundTruthScene(
        spec, rig, pts[:, :NUM_JOINTS].copy(), pts[:, NUM_JOINTS:].copy(), obs,
        StickSpec(L, spec.sport), standing, center,
    )


def emit_dataset(gt: GroundTruthScene, path, include_gt: bool = True) -> Path:
    return dsio.save(gt.to_dataset(), path, include_gt=include_gt)


# --------------------------------------------------------------------------
# suites


@dataclass(frozen=True)
class BenchmarkProtocol:
    sports: tuple[str, ...] = SPORTS
    camera_counts: tuple[int, ...] = tuple(range(3, 11))
    noise_levels: tuple[float, ...] = (0.5, 1.0, 2.0)
    seeds_per_cell: int = 1
    base_seed: int = 0
    num_frames: int = 120
    occlusion_rate: float = 0.1
    layouts: tuple[str, ...] = ("semi_spherical", "random")

    def cells(self) -> list[tuple[str, SceneSpec]]:
        """(name, spec) for each grid cell in a fixed order."""
        out = []
        for sport in self.sports:
            for C in self.camera_counts:
                for sigma in self.noise_levels:
                    for rep in range(self.seeds_per_cell):
                        seed = cell_seed(self.base_seed, sport, C, sigma, rep)
                        layout = self.layouts[(C + rep) % len(self.layouts)]
                        name = f"{sport}_c{C:02d}_n{sigma:g}_r{rep}"
                        out.append((name, SceneSpec(
                            sport=sport, num_cameras=C, layout=layout, num_frames=self.num_frames,
                            noise_sigma_px=sigma, occlusion_rate=self.occlusion_rate, seed=seed,
                        )))
        return out


def cell_seed(base_seed: int, *cell) -> int:
    """Stable 63-bit seed from the base seed and a cell key."""
    key = ":".join(str(x) for x in (base_seed,) + cell).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


PROTOCOLS = {
    "default": BenchmarkProtocol(),
    "headline": BenchmarkProtocol(noise_levels=(1.0,), seeds_per_cell=3),
    "noise-sweep": BenchmarkProtocol(noise_levels=(0.0, 0.5, 1.0, 2.0)),
    # tiny grid for quick end-to-end checks
    "smoke": BenchmarkProtocol(sports=("baseball", "golf"), camera_counts=(3, 4), noise_levels=(1.0,), num_frames=40),
}


def spec_to_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["random_bounds"] = list(spec.random_bounds)
    d["image_size"] = list(spec.image_size)
    return d


def spec_from_dict(d: dict) -> SceneSpec:
    d = dict(d)
    d["random_bounds"] = tuple(d["random_bounds"])
    d["image_size"] = tuple(d["image_size"])
    return SceneSpec(**d)


def _emit_cell(args) -> dict:
    name, spec, out_dir, include_gt = args
    gt = generate(spec)
    fname = f"{name}.json"
    emit_dataset(gt, Path(out_dir) / fname, include_gt)
    return {"name": name, "file": fname, "spec": spec_to_dict(spec), "standing_height_m": gt.standing_height_m}


def generate_suite(protocol: BenchmarkProtocol, out_dir, include_gt: bool = True, jobs: int = 1) -> Path:
    """Write one dataset per grid cell plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    work = [(name, spec, str(out_dir), include_gt) for name, spec in protocol.cells()]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_emit_cell, work))
    else:
        entries = [_emit_cell(w) for w in work]
    manifest = {"protocol": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(protocol).items()},
                "cells": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path
