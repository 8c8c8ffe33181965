import logging

import numpy as np
import pytest

from stickcalib import synth
from stickcalib.geometry import Intrinsics, Pose, exp_so3


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("stickcalib").setLevel(logging.ERROR)


def random_pose(rng, angle=0.5, trans=1.0):
    return Pose(exp_so3(rng.uniform(-angle, angle, 3)), rng.uniform(-trans, trans, 3))


def default_intrinsics():
    return Intrinsics(1000.0, 1000.0, 960.0, 540.0)


def small_scene(sport="golf", cameras=4, frames=30, sigma=0.0, occlusion=0.1, seed=0, layout="semi_spherical"):
    return synth.generate(synth.SceneSpec(
        sport=sport, num_cameras=cameras, num_frames=frames, noise_sigma_px=sigma,
        occlusion_rate=occlusion, seed=seed, layout=layout,
    ))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def noiseless_scene():
    return small_scene(cameras=4, frames=30, sigma=0.0, seed=3)


def random_problem(rng, cameras=3, frames=4, joints=3, sigma=2.0, stick_length=0.86,
                   lambda_length=0.4, lambda_smooth=0.2, loss="cauchy"):
    """Small random scene with noisy observations and a perturbed estimate."""
    from stickcalib import bundle_adjust as ba
    from stickcalib.geometry import project
    from stickcalib.scene import CameraRig, ObservationSet, SceneEstimate

    K = default_intrinsics()
    poses = [Pose.identity()] + [random_pose(rng, 0.3, 0.5) for _ in range(cameras - 1)]
    rig = CameraRig(tuple(poses), (K,) * cameras)
    pts = rng.uniform([-0.5, -0.5, 4.0], [0.5, 0.5, 5.0], (frames, joints + 2, 3))
    uv = np.array([[[project(K, p, X) for X in row] for row in pts] for p in poses])
    uv += rng.normal(0, sigma, uv.shape)
    mask = rng.random(uv.shape[:3]) > 0.15
    obs = ObservationSet(uv[:, :, :joints], uv[:, :, joints:], mask[:, :, :joints], mask[:, :, joints:], rig.intrinsics)
    est = SceneEstimate.from_points(pts + rng.normal(0, 0.02, pts.shape), joints)
    problem = ba.Problem(obs, stick_length, ba.RobustLossConfig(loss), lambda_length, lambda_smooth)
    return problem, rig, est


def fd_jacobian_error(problem, rig, scene, h=1e-6):
    """Max |J_analytic - J_central_difference| relative to max |J|.

    Robust weights are frozen in the analytic Jacobian, so the difference is
    taken on the unweighted residuals and then scaled by the base weights.
    """
    from dataclasses import replace

    from stickcalib import bundle_adjust as ba

    layout = ba.ParameterLayout.build(rig.num_cameras, problem.obs.num_joints, scene.present)
    base = ba.assemble(problem, rig, scene, layout)
    raw = ba._Evaluator(replace(problem, loss=ba.RobustLossConfig("none")), layout)
    st = ba.State.from_estimate(rig, scene)
    sw = np.ones(len(base.residuals))
    nrep = 2 * len(base.weights)
    sw[:nrep] = np.repeat(np.sqrt(base.weights), 2)
    J = base.jacobian.toarray()
    num = np.empty_like(J)
    for k in range(layout.size):
        e = np.zeros(layout.size)
        e[k] = h
        rp = raw.assemble(st.stepped(layout, e)).residuals
        rm = raw.assemble(st.stepped(layout, -e)).residuals
        num[:, k] = sw * (rp - rm) / (2 * h)
    return float(np.abs(J - num).max() / max(np.abs(J).max(), 1e-300))
