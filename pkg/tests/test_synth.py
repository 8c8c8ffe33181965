import json
import logging

import numpy as np
import pytest

from conftest import small_scene
from stickcalib import dataset, synth
from stickcalib.geometry import project
from stickcalib.initialization import normalize_points, triangulate_linear


def test_noiseless_observations_are_exact_projections(noiseless_scene):
    gt = noiseless_scene
    pts = gt.scene_gt.points
    kp, m = gt.obs.keypoints_2d, gt.obs.masks
    worst = 0.0
    for i, (pose, K) in enumerate(zip(gt.rig_gt.poses, gt.rig_gt.intrinsics)):
        for f, k in np.argwhere(m[i]):
            worst = max(worst, np.abs(kp[i, f, k] - project(K, pose, pts[f, k])).max())
    assert worst < 1e-9


@pytest.mark.parametrize("sport", synth.SPORTS)
def test_stick_is_rigid_with_regulation_length(sport):
    gt = small_scene(sport=sport, frames=40)
    lengths = np.linalg.norm(gt.stick_3d_gt[:, 1] - gt.stick_3d_gt[:, 0], axis=1)
    assert np.abs(lengths - synth.STICK_LENGTHS[sport]).max() < 1e-12
    assert gt.stick.length_m == synth.STICK_LENGTHS[sport]


def test_baseball_bat_length():
    assert synth.STICK_LENGTHS["baseball"] == 0.86


def test_semi_spherical_cameras_sit_on_the_sphere():
    gt = small_scene(cameras=7, layout="semi_spherical", seed=4)
    d = [np.linalg.norm(p.center - gt.volume_center) for p in gt.rig_gt.poses]
    assert np.allclose(d, 4.0, atol=1e-9)


def test_random_layout_respects_bounds():
    spec = synth.SceneSpec(num_cameras=10, layout="random")
    c = synth.camera_centers(spec, np.random.default_rng(0))
    r = np.linalg.norm(c[:, :2], axis=1)
    assert np.all((r >= 3.0) & (r <= 6.0))
    assert np.all((c[:, 2] >= 0.5) & (c[:, 2] <= 3.0))


def test_ground_truth_satisfies_gauge(noiseless_scene):
    p0 = noiseless_scene.rig_gt.poses[0]
    assert np.array_equal(p0.R, np.eye(3)) and np.array_equal(p0.t, np.zeros(3))


def test_generation_is_deterministic():
    a = small_scene(sigma=1.0, seed=9)
    b = small_scene(sigma=1.0, seed=9)
    c = small_scene(sigma=1.0, seed=10)
    assert dataset.dumps(a.to_dataset()) == dataset.dumps(b.to_dataset())
    assert dataset.dumps(a.to_dataset()) != dataset.dumps(c.to_dataset())


def test_noise_and_occlusion_levels():
    clean = small_scene(sigma=0.0, occlusion=0.0, seed=5, frames=60)
    noisy = small_scene(sigma=2.0, occlusion=0.3, seed=5, frames=60)
    both = clean.obs.masks & noisy.obs.masks
    diff = noisy.obs.keypoints_2d[both] - clean.obs.keypoints_2d[both]
    assert diff.std() == pytest.approx(2.0, rel=0.05)
    rate = 1 - noisy.obs.masks.sum() / clean.obs.masks.sum()
    assert rate == pytest.approx(0.3, abs=0.03)


def test_ground_truth_triangulates_exactly(noiseless_scene):
    gt = noiseless_scene
    obs = gt.obs
    C = obs.num_cameras
    x = np.stack([normalize_points(np.nan_to_num(obs.keypoints_2d[i].reshape(-1, 2)), obs.intrinsics[i]) for i in range(C)], axis=1)
    m = obs.masks.reshape(C, -1).T
    X = triangulate_linear(gt.rig_gt.projection_matrices(), x, m)
    ok = m.sum(axis=1) >= 2
    assert np.abs(X[ok] - gt.scene_gt.points.reshape(-1, 3)[ok]).max() < 1e-9


def test_character_has_plausible_height(noiseless_scene):
    assert 1.5 < noiseless_scene.standing_height_m < 1.9


@pytest.mark.parametrize(
    "kwargs",
    [dict(sport="cricket"), dict(num_cameras=2), dict(num_cameras=11), dict(layout="ring"),
     dict(noise_sigma_px=-1.0), dict(occlusion_rate=1.5), dict(num_frames=2)],
)
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(synth.InvalidSpec):
        synth.generate(synth.SceneSpec(**kwargs))


def test_visibility_warning(caplog):
    caplog.set_level(logging.WARNING, logger="stickcalib.synth")
    synth.generate(synth.SceneSpec(num_cameras=3, num_frames=20, focal_px=20000.0))
    assert any("sees the subject" in r.getMessage() for r in caplog.records)


def test_protocol_cell_counts():
    assert len(synth.PROTOCOLS["default"].cells()) == 4 * 8 * 3
    assert len(synth.PROTOCOLS["headline"].cells()) == 4 * 8 * 3
    assert len(synth.PROTOCOLS["noise-sweep"].cells()) == 4 * 8 * 4
    names = [n for n, _ in synth.PROTOCOLS["default"].cells()]
    assert len(set(names)) == len(names)
    layouts = {s.layout for _, s in synth.PROTOCOLS["default"].cells()}
    assert layouts == {"semi_spherical", "random"}


def test_cell_seed_is_stable():
    assert synth.cell_seed(0, "golf", 5, 1.0, 0) == synth.cell_seed(0, "golf", 5, 1.0, 0)
    assert synth.cell_seed(0, "golf", 5, 1.0, 0) != synth.cell_seed(1, "golf", 5, 1.0, 0)
    assert 0 <= synth.cell_seed(0, "x") < 2**63


def test_generate_suite_writes_manifest(tmp_path):
    proto = synth.BenchmarkProtocol(sports=("golf",), camera_counts=(3, 4), noise_levels=(1.0,), num_frames=10)
    path = synth.generate_suite(proto, tmp_path, include_gt=False)
    manifest = json.loads(path.read_text())
    assert [c["name"] for c in manifest["cells"]] == ["golf_c03_n1_r0", "golf_c04_n1_r0"]
    cell = manifest["cells"][0]
    assert synth.spec_from_dict(cell["spec"]) == proto.cells()[0][1]
    ds = dataset.load(tmp_path / cell["file"])
    assert ds.gt_rig is None and ds.obs.num_cameras == 3
    assert cell["standing_height_m"] > 1.0
