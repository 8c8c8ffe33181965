"""The three-stage calibration pipeline and its ablation modes.

Initialization -> Stage 1 (unscaled bundle adjustment on all keypoints) ->
Stage 2 (closed-form metric scale) -> Stage 3 (scale-aware bundle adjustment
with stick-length and temporal-smoothness terms).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import bundle_adjust as ba
from .dataset import pose_to_json
from .errors import CalibrationError, DegenerateLength, NoStickFrames, StageError
from .geometry import DEPTH_EPS, DepthNonPositive
from .initialization import RansacConfig, initialize
from .scene import FOOT_JOINTS, HEAD_JOINT, CameraRig, ObservationSet, SceneEstimate, StickSpec, validate

log = logging.getLogger(__name__)


class Mode(str, Enum):
    FULL = "full"
    HUMAN_ONLY = "human-only"
    STICK_ONLY = "stick-only"
    NO_LENGTH = "no-length"
    NO_SMOOTH = "no-smooth"


@dataclass(frozen=True)
class PipelineConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    solver_stage1: ba.SolverConfig = field(default_factory=ba.SolverConfig)
    solver_stage3: ba.SolverConfig = field(default_factory=ba.SolverConfig)
    loss: ba.RobustLossConfig = field(default_factory=ba.RobustLossConfig)
    mode: Mode = Mode.FULL
    height_prior_m: Optional[float] = None  # required by HUMAN_ONLY
    seed: int = 0  # drives the RANSAC sampler

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.HUMAN_ONLY and not (self.height_prior_m and self.height_prior_m > 0):
            raise ValueError("human-only mode needs a positive height_prior_m")

    def to_dict(self) -> dict:
        """Config-file layout; ``from_dict(to_dict())`` round-trips."""
        return {
            "ransac": asdict(self.ransac),
            "solver_stage1": asdict(self.solver_stage1),
            "solver_stage3": asdict(self.solver_stage3),
            "loss": asdict(self.loss),
            "pipeline": {"mode": self.mode.value, "height_prior_m": self.height_prior_m, "seed": self.seed},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        """Build from the config-file layout ``{ransac, solver_stage1, solver_stage3, loss, pipeline}``."""
        pipe = dict(d.get("pipeline", {}))
        return cls(
            ransac=RansacConfig(**d.get("ransac", {})),
            solver_stage1=ba.SolverConfig(**d.get("solver_stage1", {})),
            solver_stage3=ba.SolverConfig(**d.get("solver_stage3", {})),
            loss=ba.RobustLossConfig(**d.get("loss", {})),
            mode=Mode(pipe.get("mode", Mode.FULL.value)),
            height_prior_m=pipe.get("height_prior_m"),
            seed=int(pipe.get("seed", 0)),
        )


@dataclass
class PipelineResult:
    rig: CameraRig
    scene: SceneEstimate
    scale: float
    mode: Mode
    stage_costs: dict
    timings: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        """Calibration document.  Timings are left out so the file is reproducible."""
        human = self.scene.human_3d
        stick = self.scene.stick_3d

        def pts(a):
            if a.shape[1] == 0 or not np.isfinite(a).any():
                return None
            return [[None if not np.all(np.isfinite(p)) else p.tolist() for p in row] for row in a]

        return {
            "scale": self.scale,
            "mode": self.mode.value,
            "extrinsics": [pose_to_json(p) for p in self.rig.poses],
            "human_3d": pts(human),
            "stick_3d": pts(stick),
            "stage_costs": self.stage_costs,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json_dict(), separators=(",", ":")))
        return path


def load_calibration(path) -> dict:
    from .dataset import read_json

    return read_json(path)


def rig_from_calibration(doc: dict, intrinsics) -> CameraRig:
    from .dataset import pose_from_json

    return CameraRig(tuple(pose_from_json(p) for p in doc["extrinsics"]), tuple(intrinsics))


# --------------------------------------------------------------------------


def observations_for(obs: ObservationSet, mode: Mode) -> ObservationSet:
    if mode is Mode.HUMAN_ONLY:
        return obs.without_stick()
    if mode is Mode.STICK_ONLY:
        return obs.without_human()
    return obs


def drop_behind_camera(rig: CameraRig, scene: SceneEstimate, obs: ObservationSet) -> tuple[SceneEstimate, int]:
    """Remove triangulated points with non-positive depth in any camera that observes them."""
    pts = scene.points.copy()
    masks = obs.masks
    bad = np.zeros(pts.shape[:2], dtype=bool)
    for i, p in enumerate(rig.poses):
        z = pts @ p.R[2] + p.t[2]
        bad |= masks[i] & (z <= DEPTH_EPS)
    bad &= np.all(np.isfinite(pts), axis=2)
    pts[bad] = np.nan
    return SceneEstimate.from_points(pts, obs.num_joints), int(bad.sum())


def height_proxy(scene: SceneEstimate) -> np.ndarray:
    """Per-frame head to mid-ankle distance over frames where all three joints exist."""
    h = scene.human_3d
    if h.shape[1] <= max(HEAD_JOINT, *FOOT_JOINTS):
        return np.zeros(0)
    feet = 0.5 * (h[:, FOOT_JOINTS[0]] + h[:, FOOT_JOINTS[1]])
    d = np.linalg.norm(h[:, HEAD_JOINT] - feet, axis=1)
    return d[np.isfinite(d)]


def recover_scale_from_height(scene: SceneEstimate, height_m: float) -> float:
    d = height_proxy(scene)
    if len(d) == 0:
        raise NoStickFrames("no frame has head and both ankles triangulated")
    mean = float(d.mean())
    if mean < 1e-9:
        raise DegenerateLength(f"mean head-to-foot distance {mean:.3g} is degenerate")
    return height_m / mean


def stage3_problem(obs: ObservationSet, stick: StickSpec, cfg: PipelineConfig, mode: Mode) -> ba.Problem:
    s3 = cfg.solver_stage3
    lam_len = 0.0 if mode in (Mode.NO_LENGTH, Mode.HUMAN_ONLY) else s3.lambda_length
    lam_sm = 0.0 if mode is Mode.NO_SMOOTH else s3.lambda_smooth
    L = None if lam_len == 0.0 else stick.length_m
    return ba.Problem(obs, L, cfg.loss, lambda_length=lam_len, lambda_smooth=lam_sm)


def _stage(name: str, fn, *args):
    try:
        return fn(*args)
    except (CalibrationError, DepthNonPositive, np.linalg.LinAlgError, ValueError) as exc:
        raise StageError(name, exc) from exc


@dataclass
class _Prefix:
    """Everything up to and including Stage 1 (shared by modes with the same observations)."""

    obs: ObservationSet
    rig: CameraRig
    scene: SceneEstimate
    stats1: ba.SolveStats
    timings: dict
    notes: list


def _run_prefix(obs: ObservationSet, cfg: PipelineConfig) -> _Prefix:
    fatal = [d for d in validate(obs) if d.severity == "error"]
    if fatal:
        raise StageError("validate", CalibrationError("; ".join(d.message for d in fatal)))
    timings: dict = {}
    t0 = time.perf_counter()
    init = _stage("init", initialize, obs, replace(cfg.ransac, seed=cfg.seed))
    scene, dropped = drop_behind_camera(init.rig, init.scene, obs)
    notes = list(init.notes)
    if dropped:
        notes.append(f"dropped {dropped} triangulated points behind a camera")
        log.info(notes[-1])
    timings["init_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    p1 = ba.Problem(obs, None, cfg.loss)
    rig1, scene1, stats1 = _stage("stage1", ba.solve_lm, p1, init.rig, scene, cfg.solver_stage1)
    timings["stage1_s"] = time.perf_counter() - t0
    return _Prefix(obs, rig1, scene1, stats1, timings, notes)


def _finish(pre: _Prefix, stick: StickSpec, cfg: PipelineConfig, mode: Mode) -> PipelineResult:
    timings = dict(pre.timings)
    t0 = time.perf_counter()
    if mode is Mode.HUMAN_ONLY:
        s = _stage("stage2", recover_scale_from_height, pre.scene, cfg.height_prior_m)
    else:
        s = _stage("stage2", ba.recover_scale, pre.scene, stick.length_m)
    rig2, scene2 = ba.apply_scale(pre.rig, pre.scene, s)
    timings["stage2_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    p3 = stage3_problem(pre.obs, stick, cfg, mode)
    rig3, scene3, stats3 = _stage("stage3", ba.solve_lm, p3, rig2, scene2, cfg.solver_stage3)
    timings["stage3_s"] = time.perf_counter() - t0

    costs = {
        "stage1": {
            "initial": pre.stats1.initial_cost,
            "final": pre.stats1.final_cost,
            "iterations": pre.stats1.iterations,
            "termination": pre.stats1.termination,
            "rms_px": pre.stats1.final_rms_px,
            "trace": list(pre.stats1.cost_trace),
        },
        "stage3": {
            "initial": stats3.initial_cost,
            "final": stats3.final_cost,
            "iterations": stats3.iterations,
            "termination": stats3.termination,
            "rms_px": stats3.final_rms_px,
            "trace": list(stats3.cost_trace),
        },
    }
    return PipelineResult(rig3, scene3, float(s), mode, costs, timings, list(pre.notes))


def run(obs: ObservationSet, stick: StickSpec, cfg: PipelineConfig = PipelineConfig()) -> PipelineResult:
    """Calibrate a rig from 2D observations and a stick of known length."""
    used = observations_for(obs, cfg.mode)
    return _finish(_run_prefix(used, cfg), stick, cfg, cfg.mode)


def run_modes(
    obs: ObservationSet, stick: StickSpec, cfg: PipelineConfig, modes: Iterable[Mode]
) -> dict[Mode, PipelineResult]:
    """Run several modes, sharing initialization and Stage 1 between modes that
    see the same observations.  Each result equals ``run`` with that mode."""
    modes = [Mode(m) for m in modes]
    out: dict[Mode, PipelineResult] = {}
    prefixes: dict[str, _Prefix] = {}
    for m in modes:
        key = {Mode.HUMAN_ONLY: "human", Mode.STICK_ONLY: "stick"}.get(m, "all")
        if key not in prefixes:
            prefixes[key] = _run_prefix(observations_for(obs, m), cfg)
        if m is Mode.HUMAN_ONLY and not (cfg.height_prior_m and cfg.height_prior_m > 0):
            raise ValueError("human-only mode needs a positive height_prior_m")
        out[m] = _finish(prefixes[key], stick, cfg, m)
    return out
