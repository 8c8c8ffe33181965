"""JSON dataset format: observations, stick length and optional ground truth."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Intrinsics, Pose
from .scene import CameraRig, ObservationSet, SceneEstimate, StickSpec


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    obs: ObservationSet
    stick: StickSpec
    gt_rig: Optional[CameraRig] = None
    gt_scene: Optional[SceneEstimate] = None

    @property
    def has_gt(self) -> bool:
        return self.gt_rig is not None


def _points_to_json(a: np.ndarray, mask: np.ndarray) -> list:
    """Nested lists with ``None`` where masked."""

    def rec(sub, m):
        if m.ndim == 0:
            return [float(x) for x in sub] if m else None
        return [rec(s, mm) for s, mm in zip(sub, m)]

    return rec(a, mask)


def _points_from_json(data, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    out = np.full(shape + (2,), np.nan)
    mask = np.zeros(shape, dtype=bool)
    for idx in np.ndindex(*shape):
        v = data
        for i in idx:
            v = v[i]
        if v is not None:
            out[idx] = v
            mask[idx] = True
    return out, mask


def pose_to_json(p: Pose) -> dict:
    return {"R": p.R.tolist(), "t": p.t.tolist()}


def pose_from_json(d: dict) -> Pose:
    return Pose(np.array(d["R"], dtype=float), np.array(d["t"], dtype=float))


def to_json_dict(ds: Dataset, include_gt: bool = True) -> dict:
    obs = ds.obs
    doc = {
        "num_cameras": obs.num_cameras,
        "num_frames": obs.num_frames,
        "num_joints": obs.num_joints,
        "stick_length_m": ds.stick.length_m,
        "stick_label": ds.stick.label,
        "intrinsics": [k.to_dict() for k in obs.intrinsics],
        "human_2d": _points_to_json(obs.human_2d, obs.human_mask),
        "stick_2d": _points_to_json(obs.stick_2d, obs.stick_mask),
    }
    if include_gt and ds.gt_rig is not None:
        doc["gt_extrinsics"] = [pose_to_json(p) for p in ds.gt_rig.poses]
    if include_gt and ds.gt_scene is not None:
        doc["gt_human_3d"] = ds.gt_scene.human_3d.tolist()
        doc["gt_stick_3d"] = ds.gt_scene.stick_3d.tolist()
    return doc


def from_json_dict(doc: dict) -> Dataset:
    try:
        C, F, J = int(doc["num_cameras"]), int(doc["num_frames"]), int(doc["num_joints"])
        intr = tuple(Intrinsics.from_dict(k) for k in doc["intrinsics"])
        h2, hm = _points_from_json(doc["human_2d"], (C, F, J))
        s2, sm = _points_from_json(doc["stick_2d"], (C, F, 2))
        obs = ObservationSet(h2, s2, hm, sm, intr)
        stick = StickSpec(float(doc["stick_length_m"]), doc.get("stick_label", ""))
        gt_rig = gt_scene = None
        if "gt_extrinsics" in doc:
            gt_rig = CameraRig(tuple(pose_from_json(p) for p in doc["gt_extrinsics"]), intr)
        if "gt_human_3d" in doc and "gt_stick_3d" in doc:
            gt_scene = SceneEstimate(
                np.array(doc["gt_human_3d"], dtype=float).reshape(F, J, 3),
                np.array(doc["gt_stick_3d"], dtype=float).reshape(F, 2, 3),
            )
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"malformed dataset: {exc!r}") from exc
    return Dataset(obs, stick, gt_rig, gt_scene)


def dumps(ds: Dataset, include_gt: bool = True) -> str:
    return json.dumps(to_json_dict(ds, include_gt), separators=(",", ":"))


def save(ds: Dataset, path, include_gt: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(ds, include_gt))
    return path


def read_json(path) -> dict:
    """Parse a JSON file, reporting the byte offset of syntax errors."""
    raw = Path(path).read_bytes()
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        offset = len(exc.doc[: exc.pos].encode("utf-8")) if isinstance(exc.doc, str) else exc.pos
        raise DatasetFormatError(f"{path}: invalid JSON at byte offset {offset}: {exc.msg}") from exc
    except UnicodeDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON at byte offset {exc.start}: not UTF-8") from exc


def load(path) -> Dataset:
    return from_json_dict(read_json(path))
