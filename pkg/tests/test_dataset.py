import json

import numpy as np
import pytest

from stickcalib import dataset as dsio
from stickcalib import synth

from conftest import small_scene


@pytest.fixture(scope="module")
def scene():
    return small_scene(cameras=3, frames=8, sigma=0.5, occlusion=0.3, seed=1)


def test_roundtrip_is_bitwise(tmp_path, scene):
    path = synth.emit_dataset(scene, tmp_path / "ds.json")
    ds = dsio.load(path)
    obs = scene.obs
    np.testing.assert_array_equal(ds.obs.human_mask, obs.human_mask)
    np.testing.assert_array_equal(ds.obs.stick_mask, obs.stick_mask)
    np.testing.assert_array_equal(ds.obs.human_2d[obs.human_mask], obs.human_2d[obs.human_mask])
    np.testing.assert_array_equal(ds.obs.stick_2d[obs.stick_mask], obs.stick_2d[obs.stick_mask])
    assert ds.obs.intrinsics == obs.intrinsics
    assert ds.stick == scene.stick
    for a, b in zip(ds.gt_rig.poses, scene.rig_gt.poses):
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.t, b.t)
    np.testing.assert_array_equal(ds.gt_scene.human_3d, scene.human_3d_gt)


def test_masked_entries_serialize_as_null(scene):
    doc = dsio.to_json_dict(scene.to_dataset())
    c, f, j = np.argwhere(~scene.obs.human_mask)[0]
    assert doc["human_2d"][c][f][j] is None


def test_strip_ground_truth(tmp_path, scene):
    path = synth.emit_dataset(scene, tmp_path / "ds.json", include_gt=False)
    doc = json.loads(path.read_text())
    assert not any(k.startswith("gt_") for k in doc)
    assert dsio.load(path).gt_rig is None


def test_same_seed_same_bytes(tmp_path):
    a = synth.emit_dataset(small_scene(frames=6, sigma=1.0, seed=9), tmp_path / "a.json")
    b = synth.emit_dataset(small_scene(frames=6, sigma=1.0, seed=9), tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()


def test_parse_error_reports_byte_offset(tmp_path):
    p = tmp_path / "bad.json"
    p.write_bytes('{"num_cameras": 3, "é": ]'.encode())
    with pytest.raises(dsio.DatasetFormatError, match="byte offset 25"):
        dsio.load(p)


def test_missing_fields_are_format_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"num_cameras": 3}')
    with pytest.raises(dsio.DatasetFormatError):
        dsio.load(p)
