import numpy as np
import pytest

from conftest import default_intrinsics, random_pose
from stickcalib.errors import DegenerateConfiguration, DisconnectedGraph, TooFewCorrespondences
from stickcalib.geometry import Pose, project, skew
from stickcalib.initialization import (
    OverlapGraph,
    PairwiseRelativePose,
    RansacConfig,
    build_spanning_tree,
    decompose_essential,
    estimate_essential,
    initialize,
    normalize_points,
    triangulate_linear,
)
from stickcalib.initialization import _fit_essential


def _two_view(rng, n=60, outliers=0, sigma=0.0):
    K = default_intrinsics()
    X = rng.uniform([-1, -1, 4], [1, 1, 6], (n, 3))
    R = Pose(np.eye(3), np.zeros(3))
    other = Pose(random_pose(rng, 0.2, 0).R, np.array([-1.0, 0.1, 0.05]))
    x_i = np.array([project(K, R, p) for p in X])
    x_j = np.array([project(K, other, p) for p in X])
    x_i = x_i + rng.normal(0, sigma, x_i.shape)
    x_j = x_j + rng.normal(0, sigma, x_j.shape)
    if outliers:
        x_j[:outliers] = rng.uniform([0, 0], [1920, 1080], (outliers, 2))
    return K, other, X, x_i, x_j


def _rot_deg(A, B):
    return np.degrees(np.arccos(np.clip((np.trace(A @ B.T) - 1) / 2, -1, 1)))


def test_eight_point_exact_on_noiseless_data(rng):
    K, other, _, x_i, x_j = _two_view(rng, n=8)
    a, b = normalize_points(x_i, K), normalize_points(x_j, K)
    E = _fit_essential(a, b)
    ah = np.column_stack([a, np.ones(8)])
    bh = np.column_stack([b, np.ones(8)])
    assert np.abs(np.einsum("ni,ij,nj->n", bh, E, ah)).max() < 1e-10
    s = np.linalg.svd(E, compute_uv=False)
    assert s[0] == pytest.approx(s[1], rel=1e-9) and s[2] < 1e-12 * s[0]
    # proportional to [t]x R
    E_gt = skew(other.t) @ other.R
    E_gt /= np.linalg.norm(E_gt)
    En = E / np.linalg.norm(E)
    assert min(np.abs(En - E_gt).max(), np.abs(En + E_gt).max()) < 1e-8


def test_ransac_rejects_outliers_and_recovers_pose(rng):
    K, other, _, x_i, x_j = _two_view(rng, n=120, outliers=30, sigma=0.3)
    E, inl = estimate_essential(x_i, x_j, K, K, RansacConfig(), np.random.default_rng(0))
    assert inl[:30].sum() <= 2  # a random point can fall on its epipolar line
    assert inl[30:].mean() > 0.9
    rel = decompose_essential(E, x_i[inl], x_j[inl], K, K)
    assert _rot_deg(rel.rotation, other.R) < 0.5
    assert np.degrees(np.arccos(rel.translation_dir @ other.t / np.linalg.norm(other.t))) < 2.0


def test_ransac_needs_eight_points(rng):
    K, _, _, x_i, x_j = _two_view(rng, n=7)
    with pytest.raises(TooFewCorrespondences):
        estimate_essential(x_i, x_j, K, K)


def test_ransac_reports_degenerate_when_no_consensus(rng):
    K = default_intrinsics()
    x_i = rng.uniform([0, 0], [1920, 1080], (40, 2))
    x_j = rng.uniform([0, 0], [1920, 1080], (40, 2))
    with pytest.raises(DegenerateConfiguration):
        estimate_essential(x_i, x_j, K, K, RansacConfig(min_inliers=30, max_iterations=256))


def test_decompose_picks_points_in_front(rng):
    K, other, X, x_i, x_j = _two_view(rng, n=30)
    E = skew(other.t) @ other.R
    rel = decompose_essential(E, x_i, x_j, K, K)
    assert np.allclose(rel.rotation, other.R, atol=1e-9)
    assert np.allclose(rel.translation_dir, other.t / np.linalg.norm(other.t), atol=1e-9)
    assert rel.inlier_count == 30


def test_oriented_inverts_edge(rng):
    R = random_pose(rng).R
    t = np.array([0.0, 0.6, 0.8])
    rel = PairwiseRelativePose(0, 1, R, t, 10)
    R10, t10 = rel.oriented(1)
    assert np.allclose(R10 @ R, np.eye(3)) and np.allclose(R10 @ t + t10, 0)
    with pytest.raises(ValueError):
        rel.oriented(2)


def _graph(num, weights):
    g = OverlapGraph(num)
    for (i, j), w in weights.items():
        g.edges[(i, j)] = PairwiseRelativePose(i, j, np.eye(3), np.array([1.0, 0, 0]), w)
    return g


def test_spanning_tree_keeps_heaviest_edges():
    g = _graph(3, {(0, 1): 100, (1, 2): 80, (0, 2): 10})
    assert build_spanning_tree(g) == [(0, 1), (1, 2)]


def test_spanning_tree_tie_break_prefers_smaller_indices():
    g = _graph(3, {(0, 1): 50, (0, 2): 50, (1, 2): 50})
    assert build_spanning_tree(g) == [(0, 1), (0, 2)]


def test_spanning_tree_disconnected_raises():
    g = _graph(4, {(0, 1): 50, (2, 3): 50})
    assert not g.is_connected()
    with pytest.raises(DisconnectedGraph):
        build_spanning_tree(g)


def test_triangulation_is_exact_on_noiseless_views(rng):
    poses = [Pose.identity()] + [random_pose(rng, 0.2, 1.0) for _ in range(3)]
    X = rng.uniform([-1, -1, 4], [1, 1, 6], (25, 3))
    P = np.stack([np.hstack([p.R, p.t[:, None]]) for p in poses])
    x = np.stack([(X @ p.R.T + p.t) for p in poses], axis=1)
    x = x[..., :2] / x[..., 2:]
    mask = np.ones((25, 4), dtype=bool)
    mask[0, 1:] = False  # single view -> NaN
    mask[1, 2:] = False  # two views still fine
    out = triangulate_linear(P, x, mask)
    assert np.all(np.isnan(out[0]))
    assert np.abs(out[1:] - X[1:]).max() < 1e-9


def test_initialize_noiseless_recovers_rig_up_to_scale(noiseless_scene):
    gt = noiseless_scene
    init = initialize(gt.obs)
    assert init.notes == []
    assert init.rig.poses[0].R is not None and np.allclose(init.rig.poses[0].R, np.eye(3))
    for est, ref in zip(init.rig.poses, gt.rig_gt.poses):
        assert _rot_deg(est.R, ref.R) < 0.05
    c_est = np.array([p.center for p in init.rig.poses])
    c_gt = np.array([p.center for p in gt.rig_gt.poses])
    s = np.linalg.norm(c_gt[1]) / np.linalg.norm(c_est[1])
    assert np.abs(s * c_est - c_gt).max() < 1e-3 * np.linalg.norm(c_gt[1])


def test_loop_consistency_of_relative_rotations(noiseless_scene):
    init = initialize(noiseless_scene.obs)
    # composing relative rotations around any triangle gives the identity
    e = init.graph.edges
    for i, j, k in [(0, 1, 2), (1, 2, 3), (0, 2, 3)]:
        if (i, j) in e and (j, k) in e and (i, k) in e:
            loop = e[(i, k)].rotation.T @ e[(j, k)].rotation @ e[(i, j)].rotation
            assert _rot_deg(loop, np.eye(3)) < 0.05
