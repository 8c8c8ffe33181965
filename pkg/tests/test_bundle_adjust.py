from dataclasses import replace

import numpy as np
import pytest

from conftest import fd_jacobian_error, random_pose, random_problem, small_scene
from stickcalib import bundle_adjust as ba
from stickcalib.errors import DegenerateLength, InconsistentLayout, MaskedResidual, NoStickFrames
from stickcalib.geometry import Pose, exp_so3
from stickcalib.scene import CameraRig, SceneEstimate


def _stick_scene(p0, p1, frames=1):
    stick = np.tile(np.array([p0, p1], dtype=float), (frames, 1, 1))
    return SceneEstimate(np.zeros((frames, 0, 3)), stick)


def test_length_residual_examples():
    assert ba.eval_length_residual(0, _stick_scene([0, 0, 0], [0.86, 0, 0]), 0.86) == pytest.approx(0.0, abs=1e-15)
    assert ba.eval_length_residual(0, _stick_scene([0, 0, 0], [0, 1.0, 0]), 0.86) == pytest.approx(0.14)


def test_length_residual_coincident_endpoints_uses_clamped_gradient():
    s = _stick_scene([1, 2, 3], [1, 2, 3])
    assert ba.eval_length_residual(0, s, 0.86) == pytest.approx(-0.86)
    g0, g1 = ba.length_jacobian(0, s)
    assert np.all(np.isfinite(g0)) and np.all(g0 == 0) and np.all(g1 == 0)


def test_smoothness_residual_example():
    pts = np.zeros((3, 1, 3))
    pts[:, 0, 0] = [0.0, 1.0, 4.0]
    scene = SceneEstimate(pts, np.full((3, 2, 3), np.nan))
    assert np.allclose(ba.eval_smoothness_residual(1, 0, scene), [2.0, 0.0, 0.0])
    assert ba.eval_smoothness_residual(0, 0, scene) is None
    assert ba.eval_smoothness_residual(1, 1, scene) is None  # stick endpoint absent


def test_cauchy_weight_examples():
    assert ba.cauchy_weight(0.0, 2.0) == 1.0
    assert ba.cauchy_weight(4.0, 2.0) == pytest.approx(0.5)
    assert ba.cauchy_weight(12.0, 2.0) == pytest.approx(0.25)
    # rho'(s) equals the weight
    s, c, h = 3.0, 2.0, 1e-6
    assert (ba.cauchy_rho(s + h, c) - ba.cauchy_rho(s - h, c)) / (2 * h) == pytest.approx(ba.cauchy_weight(s, c), rel=1e-8)


def test_reprojection_block_masked_raises(rng):
    problem, rig, scene = random_problem(rng)
    c, f, k = np.argwhere(~problem.obs.human_mask)[0]
    with pytest.raises(MaskedResidual):
        ba.eval_reproj_residual(ba.ResidualBlock(ba.REPROJ_HUMAN, c, f, k), rig, scene, problem.obs)


@pytest.mark.parametrize("loss", ["cauchy", "none"])
def test_jacobian_matches_finite_differences(loss):
    rng = np.random.default_rng(7)
    for _ in range(5):
        problem, rig, scene = random_problem(rng, loss=loss)
        assert fd_jacobian_error(problem, rig, scene) < 1e-6


def test_jacobian_at_coincident_stick_endpoints_is_finite(rng):
    problem, rig, scene = random_problem(rng, frames=3)
    pts = scene.points.copy()
    pts[1, -1] = pts[1, -2]
    scene = SceneEstimate.from_points(pts, problem.obs.num_joints)
    asm = ba.assemble(problem, rig, scene)
    assert np.all(np.isfinite(asm.jacobian.data))
    kind, lo, hi = [b for b in asm.blocks if b[0] == ba.STICK_LENGTH][0]
    assert np.isclose(asm.residuals[lo:hi], -0.86 * np.sqrt(0.4)).any()


def test_residual_blocks_match_assembly_rows(rng):
    problem, rig, scene = random_problem(rng)
    layout = ba.ParameterLayout.build(rig.num_cameras, problem.obs.num_joints, scene.present)
    blocks = ba.residual_blocks(problem, layout)
    asm = ba.assemble(problem, rig, scene, layout)
    assert sum(b.dimension for b in blocks) == len(asm.residuals)
    w = np.repeat(np.sqrt(asm.weights), 2)
    row = 0
    for b in blocks:
        if b.kind in (ba.REPROJ_HUMAN, ba.REPROJ_STICK):
            r = ba.eval_reproj_residual(b, rig, scene, problem.obs)
            assert np.allclose(asm.residuals[row : row + 2], r * w[row : row + 2])
        elif b.kind == ba.STICK_LENGTH:
            r = ba.eval_length_residual(b.frame, scene, 0.86)
            assert asm.residuals[row] == pytest.approx(np.sqrt(0.4) * r)
        else:
            k = b.keypoint + (problem.obs.num_joints if b.kind == ba.SMOOTH_STICK else 0)
            r = ba.eval_smoothness_residual(b.frame, k, scene)
            assert np.allclose(asm.residuals[row : row + 3], np.sqrt(0.2) * r)
        row += b.dimension


def test_layout_mismatch_raises(rng):
    problem, rig, scene = random_problem(rng)
    present = scene.present.copy()
    present[0, 0] = not present[0, 0]
    layout = ba.ParameterLayout.build(rig.num_cameras, problem.obs.num_joints, present)
    with pytest.raises(InconsistentLayout):
        ba.assemble(problem, rig, scene, layout)


@pytest.fixture(scope="module")
def clean():
    return small_scene(cameras=4, frames=12, sigma=0.0, occlusion=0.0, seed=11)


def test_residual_census(clean):
    obs, F, J = clean.obs, clean.obs.num_frames, clean.obs.num_joints
    scene = clean.scene_gt
    full = ba.Problem(obs, 0.86, lambda_length=0.4, lambda_smooth=0.2)
    asm = ba.assemble(full, clean.rig_gt, scene)
    counts = {k: hi - lo for k, lo, hi in asm.blocks}
    assert counts[ba.REPROJ_HUMAN] == 2 * obs.human_mask.sum()
    assert counts[ba.REPROJ_STICK] == 2 * obs.stick_mask.sum()
    assert counts[ba.STICK_LENGTH] == F
    assert counts[ba.SMOOTH_HUMAN] + counts[ba.SMOOTH_STICK] == 3 * (F - 2) * (J + 2)
    no_smooth = ba.assemble(replace(full, lambda_smooth=0.0), clean.rig_gt, scene)
    assert len(asm.residuals) - len(no_smooth.residuals) == 3 * (F - 2) * (J + 2)


def test_ground_truth_start_converges_immediately(clean):
    problem = ba.Problem(clean.obs, None)
    _, _, stats = ba.solve_lm(problem, clean.rig_gt, clean.scene_gt)
    assert stats.iterations <= 2
    assert stats.final_rms_px < 1e-8


def _perturbed(rng, rig, scene, angle_deg=0.5, trans=0.01):
    poses = [rig.poses[0]]
    for p in rig.poses[1:]:
        w = rng.normal(size=3)
        w *= np.radians(angle_deg) / np.linalg.norm(w)
        d = rng.normal(size=3)
        poses.append(Pose(exp_so3(w) @ p.R, p.t + trans * d / np.linalg.norm(d)))
    pts = scene.points + rng.normal(0, 0.01, scene.points.shape)
    return CameraRig(tuple(poses), rig.intrinsics), SceneEstimate.from_points(pts, scene.human_3d.shape[1])


def test_recovers_from_perturbation(clean, rng):
    rig0, scene0 = _perturbed(rng, clean.rig_gt, clean.scene_gt)
    problem = ba.Problem(clean.obs, clean.stick.length_m, lambda_length=0.4, lambda_smooth=0.0)
    rig, scene, stats = ba.solve_lm(problem, rig0, scene0)
    assert stats.final_rms_px < 1e-6
    for est, ref in zip(rig.poses, clean.rig_gt.poses):
        ang = np.degrees(np.arccos(np.clip((np.trace(est.R @ ref.R.T) - 1) / 2, -1, 1)))
        assert ang < 1e-4
        assert np.linalg.norm(est.t - ref.t) < 1e-5
    cost = stats.cost_trace
    assert all(b <= a for a, b in zip(cost, cost[1:]))
    assert stats.final_cost <= stats.initial_cost


def test_cost_trace_monotone_on_noisy_problem():
    rng = np.random.default_rng(3)
    problem, rig, scene = random_problem(rng, cameras=4, frames=6, joints=5)
    _, _, stats = ba.solve_lm(problem, rig, scene)
    assert all(b <= a for a, b in zip(stats.cost_trace, stats.cost_trace[1:]))
    assert stats.termination in ("gradient", "step", "cost", "damping", "max_iterations")


def test_stage1_objective_is_similarity_invariant(clean, rng):
    rig0, scene0 = _perturbed(rng, clean.rig_gt, clean.scene_gt)
    problem = ba.Problem(clean.obs, None)
    base = ba.objective(problem, rig0, scene0)
    assert ba.objective(problem, rig0.scaled(2.7), scene0.scaled(2.7)) == pytest.approx(base, rel=1e-10)
    # re-expressing the world in another frame leaves reprojection unchanged
    T = random_pose(rng)
    poses = [p.compose(T) for p in rig0.poses]
    Tinv = T.inverse()
    pts = scene0.points @ Tinv.R.T + Tinv.t
    moved = SceneEstimate.from_points(pts, scene0.human_3d.shape[1])
    assert ba._Evaluator(problem, ba.ParameterLayout.build(4, moved.human_3d.shape[1], moved.present)).cost(
        ba.State(np.stack([p.R for p in poses]), np.stack([p.t for p in poses]), moved.points)
    ) == pytest.approx(base, rel=1e-9)


def test_solution_is_gauge_consistent(clean, rng):
    rig0, scene0 = _perturbed(rng, clean.rig_gt, clean.scene_gt, 0.2, 0.005)
    problem = ba.Problem(clean.obs, None)
    rig, _, _ = ba.solve_lm(problem, rig0, scene0)
    assert np.array_equal(rig.poses[0].R, np.eye(3)) and np.array_equal(rig.poses[0].t, np.zeros(3))


def test_sparse_and_dense_solves_agree():
    rng = np.random.default_rng(5)
    problem, rig, scene = random_problem(rng, cameras=4, frames=12, joints=6, sigma=1.0)
    layout = ba.ParameterLayout.build(rig.num_cameras, problem.obs.num_joints, scene.present)
    assert layout.size > ba.DENSE_SOLVE_MAX
    asm = ba.assemble(problem, rig, scene, layout)
    A = (asm.jacobian.T @ asm.jacobian).tocsc()
    g = asm.jacobian.T @ asm.residuals
    solver = ba._DampedSolver(layout.num_pose_params)
    solver.set_matrix(A, g)
    x = solver.solve(1e-3)
    Ad = A.toarray()
    ref = np.linalg.solve(Ad + 1e-3 * np.diag(np.diag(Ad)), -g)
    assert np.allclose(x, ref, rtol=1e-7, atol=1e-9 * np.abs(ref).max())


def test_recover_scale_examples():
    assert ba.recover_scale(_stick_scene([0, 0, 0], [0.43, 0, 0], 5), 0.86) == pytest.approx(2.0)
    lengths = np.array([1.0, 1.1, 0.9, 1.0, 10.0])
    assert ba.robust_mean(lengths) == pytest.approx(1.0)
    assert ba.robust_mean(np.array([2.0, 2.0, 2.0])) == 2.0


def test_recover_scale_errors():
    empty = SceneEstimate(np.zeros((2, 0, 3)), np.full((2, 2, 3), np.nan))
    with pytest.raises(NoStickFrames):
        ba.recover_scale(empty, 0.86)
    with pytest.raises(DegenerateLength):
        ba.recover_scale(_stick_scene([1, 1, 1], [1, 1, 1], 3), 0.86)


def test_apply_scale_scales_translations_and_points(clean):
    rig, scene = ba.apply_scale(clean.rig_gt, clean.scene_gt, 3.0)
    assert np.allclose(rig.poses[1].t, 3.0 * clean.rig_gt.poses[1].t)
    assert np.allclose(rig.poses[1].R, clean.rig_gt.poses[1].R)
    assert np.allclose(scene.stick_3d, 3.0 * clean.scene_gt.stick_3d)
