"""Calibration metrics: rigid (scale-free) alignment of camera centers, then
per-camera rotation and translation errors with aggregate reports.

Rotations here are world-to-camera (``Pose.R``).  The alignment acts on world
coordinates, so it composes with camera-to-world orientations ``R.T``; the
rotation error is the geodesic angle between ``R_align @ R_est.T`` and
``R_gt.T``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import CameraCountMismatch, DegenerateConfiguration
from .scene import CameraRig

log = logging.getLogger(__name__)

_COLLINEAR_TOL = 1e-9


@dataclass(frozen=True)
class AlignmentTransform:
    """World-space rigid map ``x -> R @ x + t`` taking estimate to ground truth."""

    R: np.ndarray
    t: np.ndarray
    degenerate: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.R.T + self.t


def align_rigid(est: np.ndarray, gt: np.ndarray, strict: bool = False) -> AlignmentTransform:
    """Least-squares rigid transform (no scale) mapping ``est`` points onto ``gt``.

    Collinear or coincident inputs leave a rotation about the line unobservable;
    the minimum-norm SVD solution is then returned with ``degenerate=True``
    (or ``DegenerateConfiguration`` is raised when ``strict``).
    """
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if est.shape != gt.shape:
        raise CameraCountMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth points")
    me, mg = est.mean(axis=0), gt.mean(axis=0)
    E, G = est - me, gt - mg
    H = G.T @ E
    U, S, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    spread = max(np.linalg.svd(E, compute_uv=False)[0], np.linalg.svd(G, compute_uv=False)[0], 1.0)
    degenerate = len(est) < 3 or S[1] <= _COLLINEAR_TOL * spread**2
    if degenerate:
        msg = "camera centers are collinear or coincident; rotation about their line is unobservable"
        if strict:
            raise DegenerateConfiguration(msg)
        log.warning(msg)
    return AlignmentTransform(R, mg - R @ me, bool(degenerate))


def rotation_error_deg(R_est: np.ndarray, R_gt: np.ndarray, R_align: np.ndarray = np.eye(3)) -> float:
    """Geodesic angle (degrees) between aligned estimated and true camera orientations."""
    M = np.asarray(R_gt) @ np.asarray(R_align) @ np.asarray(R_est).T
    # arccos((tr M - 1) / 2) written as atan2(sin, cos): arccos loses about
    # half the digits near zero, atan2 stays accurate over the whole range
    c = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def translation_error_m(x_est: np.ndarray, x_gt: np.ndarray, align: AlignmentTransform) -> float:
    return float(np.linalg.norm(align.apply(x_est) - np.asarray(x_gt)))


def _positions(poses, use_centers: bool) -> np.ndarray:
    if use_centers:
        return np.array([p.center for p in poses])
    return np.array([p.t for p in poses])


@dataclass
class CalibrationReport:
    rot_err_deg: list
    trans_err_m: list
    aligned_on: str = "centers"
    degenerate_alignment: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def num_cameras(self) -> int:
        return len(self.rot_err_deg)

    def summary(self) -> dict:
        r, t = np.asarray(self.rot_err_deg), np.asarray(self.trans_err_m)
        return {
            "rot_mean_deg": float(r.mean()),
            "rot_median_deg": float(np.median(r)),
            "rot_var_deg2": float(r.var()),
            "trans_mean_m": float(t.mean()),
            "trans_median_m": float(np.median(t)),
            "trans_var_m2": float(t.var()),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        return cls(
            list(d["rot_err_deg"]),
            list(d["trans_err_m"]),
            d.get("aligned_on", "centers"),
            bool(d.get("degenerate_alignment", False)),
            dict(d.get("meta", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["camera", "rot_err_deg", "trans_err_m"])
        for i, (r, t) in enumerate(zip(self.rot_err_deg, self.trans_err_m)):
            w.writerow([i, repr(r), repr(t)])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'camera':>6}  {'rot (deg)':>12}  {'trans (m)':>12}"]
        for i, (r, t) in enumerate(zip(self.rot_err_deg, self.trans_err_m)):
            lines.append(f"{i:>6}  {r:>12.6f}  {t:>12.6f}")
        s = self.summary()
        lines.append(f"{'mean':>6}  {s['rot_mean_deg']:>12.6f}  {s['trans_mean_m']:>12.6f}")
        lines.append(f"{'median':>6}  {s['rot_median_deg']:>12.6f}  {s['trans_median_m']:>12.6f}")
        lines.append(f"{'var':>6}  {s['rot_var_deg2']:>12.3e}  {s['trans_var_m2']:>12.3e}")
        return "\n".join(lines)


def evaluate_poses(est, gt, use_centers: bool = True, meta: Optional[dict] = None) -> CalibrationReport:
    """Score world-to-camera pose sequences in any world frame: align once on
    camera positions, then measure every camera."""
    est, gt = list(est), list(gt)
    if len(est) != len(gt):
        raise CameraCountMismatch(f"estimate has {len(est)} cameras, ground truth {len(gt)}")
    pe, pg = _positions(est, use_centers), _positions(gt, use_centers)
    al = align_rigid(pe, pg)
    rot = [rotation_error_deg(a.R, b.R, al.R) for a, b in zip(est, gt)]
    trans = [translation_error_m(x, y, al) for x, y in zip(pe, pg)]
    return CalibrationReport(rot, trans, "centers" if use_centers else "t", al.degenerate, dict(meta or {}))


def evaluate_rigs(est: CameraRig, gt: CameraRig, use_centers: bool = True, meta: Optional[dict] = None) -> CalibrationReport:
    return evaluate_poses(est.poses, gt.poses, use_centers, meta)


def evaluate(result, gt, use_centers: bool = True, meta: Optional[dict] = None) -> CalibrationReport:
    """Score a pipeline result (anything with ``.rig``) against ground truth
    (a ``GroundTruthScene``, a ``Dataset`` with ``gt_rig`` or a ``CameraRig``)."""
    est_rig = getattr(result, "rig", result)
    gt_rig = getattr(gt, "rig_gt", None) or getattr(gt, "gt_rig", None) or gt
    if not isinstance(gt_rig, CameraRig):
        raise ValueError("ground truth extrinsics are missing")
    return evaluate_rigs(est_rig, gt_rig, use_centers, meta)


# --------------------------------------------------------------------------
# suite aggregation


def aggregate(reports: Iterable[CalibrationReport]) -> dict:
    """Mean/median/variance over all cameras of all reports, plus the mean of per-scene means."""
    reports = list(reports)
    if not reports:
        return {"scenes": 0, "cameras": 0}
    r = np.concatenate([np.asarray(x.rot_err_deg, dtype=float) for x in reports])
    t = np.concatenate([np.asarray(x.trans_err_m, dtype=float) for x in reports])
    return {
        "scenes": len(reports),
        "cameras": int(len(r)),
        "rot_mean_deg": float(r.mean()),
        "rot_median_deg": float(np.median(r)),
        "rot_var_deg2": float(r.var()),
        "trans_mean_m": float(t.mean()),
        "trans_median_m": float(np.median(t)),
        "trans_var_m2": float(t.var()),
        "scene_rot_mean_deg": float(np.mean([np.mean(x.rot_err_deg) for x in reports])),
        "scene_trans_mean_m": float(np.mean([np.mean(x.trans_err_m) for x in reports])),
    }


def group_by(reports: Sequence[CalibrationReport], key: str) -> dict:
    """Aggregate reports grouped on ``report.meta[key]`` (e.g. ``num_cameras`` or ``noise_sigma_px``)."""
    groups: dict = {}
    for rep in reports:
        groups.setdefault(rep.meta.get(key), []).append(rep)
    return {k: aggregate(v) for k, v in sorted(groups.items(), key=lambda kv: (kv[0] is None, kv[0]))}


_AGG_COLS = ("scenes", "rot_mean_deg", "rot_median_deg", "rot_var_deg2", "trans_mean_m", "trans_median_m", "trans_var_m2")


def grouped_csv(groups: dict, key: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key, *_AGG_COLS])
    for k, agg in groups.items():
        w.writerow([k, *(agg.get(c) for c in _AGG_COLS)])
    return buf.getvalue()


def grouped_table(groups: dict, key: str) -> str:
    head = f"{key:>14}  {'n':>4}  {'rot mean':>10}  {'rot var':>10}  {'trans mean':>11}  {'trans var':>10}"
    lines = [head]
    for k, a in groups.items():
        lines.append(
            f"{str(k):>14}  {a['scenes']:>4}  {a['rot_mean_deg']:>10.5f}  {a['rot_var_deg2']:>10.3e}"
            f"  {a['trans_mean_m']:>11.6f}  {a['trans_var_m2']:>10.3e}"
        )
    return "\n".join(lines)


def check_thresholds(summary: dict, thresholds: dict) -> list[str]:
    """Violations of ``{"rot_deg": x, "trans_m": y}`` against mean errors."""
    keys = {"rot_deg": "rot_mean_deg", "trans_m": "trans_mean_m"}
    out = []
    for name, limit in thresholds.items():
        if name not in keys:
            raise ValueError(f"unknown threshold {name!r}; expected one of {sorted(keys)}")
        value = summary[keys[name]]
        if not value <= limit:
            out.append(f"{name}: mean {value:.6g} exceeds {limit:.6g}")
    return out
