"""Sparse bundle adjustment with stick-length and smoothness terms.

Parameters are the poses of cameras 1..C-1 (camera 0 is the gauge) followed
by every present 3D point, human joints before stick endpoints.  Poses are
updated with ``R <- exp([w]x) R`` and ``t <- t + dt``, points additively.

The robust loss wraps only the reprojection terms and is realized by IRLS:
weights ``w = 1 / (1 + |r|^2 / c^2)`` are frozen during one LM iteration and
recomputed after every accepted step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DegenerateLength,
    InconsistentLayout,
    MaskedResidual,
    NoStickFrames,
    NumericalFailure,
)
from .geometry import DEPTH_EPS, DepthNonPositive, Pose, exp_so3, orthonormalize, project, project_with_jacobians
from .scene import CameraRig, ObservationSet, SceneEstimate

log = logging.getLogger(__name__)

LENGTH_EPS = 1e-6
DENSE_SOLVE_MAX = 200
MAX_DAMPING = 1e16

REPROJ_HUMAN, REPROJ_STICK, STICK_LENGTH, SMOOTH_HUMAN, SMOOTH_STICK = (
    "ReprojHuman", "ReprojStick", "StickLength", "SmoothHuman", "SmoothStick",
)
RESIDUAL_DIMS = {REPROJ_HUMAN: 2, REPROJ_STICK: 2, STICK_LENGTH: 1, SMOOTH_HUMAN: 3, SMOOTH_STICK: 3}


@dataclass(frozen=True)
class RobustLossConfig:
    kind: str = "cauchy"  # or "none"
    scale_px: float = 2.0

    def __post_init__(self):
        if self.kind not in ("cauchy", "none"):
            raise ValueError(f"unknown robust loss {self.kind!r}")
        if self.kind == "cauchy" and not self.scale_px > 0:
            raise ValueError("Cauchy scale must be positive")


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 100
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    gradient_tol: float = 1e-10
    step_tol: float = 1e-10
    cost_tol: float = 1e-12
    lambda_length: float = 0.4
    lambda_smooth: float = 0.2

    def __post_init__(self):
        for name in ("max_iterations", "initial_damping", "damping_up", "damping_down",
                     "gradient_tol", "step_tol", "cost_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_length < 0 or self.lambda_smooth < 0:
            raise ValueError("term weights must be non-negative")


class ResidualBlock(NamedTuple):
    kind: str
    camera: int = -1
    frame: int = -1
    keypoint: int = -1  # joint index, or endpoint index for stick kinds

    @property
    def dimension(self) -> int:
        return RESIDUAL_DIMS[self.kind]


# --------------------------------------------------------------------------
# single-block evaluation


def cauchy_weight(r_sq, c: float):
    """IRLS weight of the Cauchy loss ``rho(s) = c^2 log(1 + s / c^2)``."""
    return 1.0 / (1.0 + np.asarray(r_sq, dtype=float) / (c * c))


def cauchy_rho(r_sq, c: float):
    return c * c * np.log1p(np.asarray(r_sq, dtype=float) / (c * c))


def eval_reproj_residual(block: ResidualBlock, rig: CameraRig, scene: SceneEstimate, obs: ObservationSet) -> np.ndarray:
    """``observed - projected`` for one visible keypoint."""
    i, f, k = block.camera, block.frame, block.keypoint
    if block.kind == REPROJ_HUMAN:
        visible, uv, P = obs.human_mask[i, f, k], obs.human_2d[i, f, k], scene.human_3d[f, k]
    elif block.kind == REPROJ_STICK:
        visible, uv, P = obs.stick_mask[i, f, k], obs.stick_2d[i, f, k], scene.stick_3d[f, k]
    else:
        raise ValueError(f"{block.kind} is not a reprojection block")
    if not visible:
        raise MaskedResidual(f"{block} refers to an invisible observation")
    if not np.all(np.isfinite(P)):
        raise MaskedResidual(f"{block} refers to an absent 3D point")
    return uv - project(rig.intrinsics[i], rig.poses[i], P)


def eval_length_residual(f: int, scene: SceneEstimate, L: float) -> float:
    """Signed deviation of the stick length at frame ``f`` from ``L``."""
    d = scene.stick_3d[f, 1] - scene.stick_3d[f, 0]
    return float(np.linalg.norm(d) - L)


def length_jacobian(f: int, scene: SceneEstimate) -> tuple[np.ndarray, np.ndarray]:
    """(d r / d X_f0, d r / d X_f1) with the length clamped below by ``LENGTH_EPS``."""
    d = scene.stick_3d[f, 1] - scene.stick_3d[f, 0]
    g = d / max(float(np.linalg.norm(d)), LENGTH_EPS)
    return -g, g


def eval_smoothness_residual(f: int, keypoint: int, scene: SceneEstimate) -> Optional[np.ndarray]:
    """Second difference at ``f`` of pooled keypoint ``keypoint``; None if any frame lacks the point."""
    pts = scene.points
    if f < 1 or f > pts.shape[0] - 2:
        return None
    trip = pts[f - 1 : f + 2, keypoint]
    if not np.all(np.isfinite(trip)):
        return None
    return trip[0] - 2.0 * trip[1] + trip[2]


# --------------------------------------------------------------------------
# layout and problem


@dataclass(frozen=True, eq=False)
class ParameterLayout:
    num_cameras: int
    num_joints: int
    present: np.ndarray  # (F, J + 2) bool
    point_col: np.ndarray  # (F, J + 2) int, -1 where absent

    @classmethod
    def build(cls, num_cameras: int, num_joints: int, present: np.ndarray) -> "ParameterLayout":
        present = np.asarray(present, dtype=bool)
        col = np.full(present.shape, -1, dtype=np.int64)
        base = 6 * (num_cameras - 1)
        order = [present[:, :num_joints], present[:, num_joints:]]
        n = 0
        for block, sl in zip(order, (slice(0, num_joints), slice(num_joints, None))):
            idx = np.argwhere(block)
            sub = np.full(block.shape, -1, dtype=np.int64)
            sub[tuple(idx.T)] = base + 3 * (n + np.arange(len(idx)))
            col[:, sl] = sub
            n += len(idx)
        return cls(num_cameras, num_joints, present, col)

    @property
    def num_pose_params(self) -> int:
        return 6 * (self.num_cameras - 1)

    @property
    def num_points(self) -> int:
        return int(self.present.sum())

    @property
    def size(self) -> int:
        return self.num_pose_params + 3 * self.num_points

    def pose_col(self, cam: int) -> int:
        if cam == 0:
            raise ValueError("camera 0 is gauge-fixed and has no parameters")
        return 6 * (cam - 1)


@dataclass(frozen=True, eq=False)
class Problem:
    """Everything a solve needs besides the current estimate."""

    obs: ObservationSet
    stick_length: Optional[float] = None  # None disables the length term
    loss: RobustLossConfig = field(default_factory=RobustLossConfig)
    lambda_length: float = 0.0
    lambda_smooth: float = 0.0


@dataclass
class State:
    """Mutable working copy of rig parameters and points."""

    R: np.ndarray  # (C, 3, 3)
    t: np.ndarray  # (C, 3)
    points: np.ndarray  # (F, J + 2, 3)

    @classmethod
    def from_estimate(cls, rig: CameraRig, scene: SceneEstimate) -> "State":
        return cls(np.stack([p.R for p in rig.poses]), np.stack([p.t for p in rig.poses]), scene.points.copy())

    def to_estimate(self, rig: CameraRig, num_joints: int) -> tuple[CameraRig, SceneEstimate]:
        poses = (rig.poses[0],) + tuple(Pose(self.R[i], self.t[i]) for i in range(1, len(self.R)))
        return CameraRig(poses, rig.intrinsics), SceneEstimate.from_points(self.points, num_joints)

    def copy(self) -> "State":
        return State(self.R.copy(), self.t.copy(), self.points.copy())

    def stepped(self, layout: ParameterLayout, delta: np.ndarray) -> "State":
        new = self.copy()
        for i in range(1, layout.num_cameras):
            d = delta[6 * (i - 1) : 6 * i]
            new.R[i] = orthonormalize(exp_so3(d[:3]) @ self.R[i])
            new.t[i] = self.t[i] + d[3:]
        cols = layout.point_col[layout.present]
        new.points[layout.present] += delta[cols[:, None] + np.arange(3)]
        return new

    def param_norm(self, layout: ParameterLayout) -> float:
        return float(np.sqrt((self.t[1:] ** 2).sum() + (self.points[layout.present] ** 2).sum()))


class _Observations(NamedTuple):
    cam: np.ndarray
    frame: np.ndarray
    kp: np.ndarray
    uv: np.ndarray


def _visible_observations(obs: ObservationSet, layout: ParameterLayout) -> _Observations:
    m = obs.masks & layout.present[None]
    cam, frame, kp = np.nonzero(m)
    # human rows before stick rows, then camera/frame/keypoint order
    is_stick = kp >= layout.num_joints
    order = np.lexsort((kp, frame, cam, is_stick))
    cam, frame, kp = cam[order], frame[order], kp[order]
    return _Observations(cam, frame, kp, obs.keypoints_2d[cam, frame, kp])


def _smoothness_cells(layout: ParameterLayout) -> tuple[np.ndarray, np.ndarray]:
    pr = layout.present
    ok = pr[:-2] & pr[1:-1] & pr[2:]
    f, k = np.nonzero(ok)
    f = f + 1
    is_stick = k >= layout.num_joints
    order = np.lexsort((k, f, is_stick))
    return f[order], k[order]


def _length_frames(layout: ParameterLayout) -> np.ndarray:
    J = layout.num_joints
    if layout.present.shape[1] < J + 2:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(layout.present[:, J] & layout.present[:, J + 1])


class Assembly(NamedTuple):
    residuals: np.ndarray  # weighted, stacked
    jacobian: sp.csr_matrix
    weights: np.ndarray  # IRLS weights per reprojection observation
    cost: float  # robust objective value
    blocks: list  # (kind, row_start, row_stop)


class _Evaluator:
    """Caches the index structure of one problem so repeated evaluations are cheap."""

    def __init__(self, problem: Problem, layout: ParameterLayout):
        self.problem = problem
        self.layout = layout
        obs = problem.obs
        if layout.present.shape != obs.masks.shape[1:]:
            raise InconsistentLayout(f"layout covers {layout.present.shape}, observations {obs.masks.shape[1:]}")
        self.o = _visible_observations(obs, layout)
        self.Kmat = np.array([[k.fx, k.fy, k.cx, k.cy, k.skew] for k in obs.intrinsics])[self.o.cam]
        self.use_length = problem.stick_length is not None and problem.lambda_length > 0
        self.use_smooth = problem.lambda_smooth > 0
        self.len_frames = _length_frames(layout) if self.use_length else np.zeros(0, dtype=np.int64)
        self.sm_f, self.sm_k = _smoothness_cells(layout) if self.use_smooth else (np.zeros(0, int), np.zeros(0, int))

    def reprojection(self, st: State):
        o = self.o
        P = st.points[o.frame, o.kp]
        uv, Jp, Jpose, z = project_with_jacobians(self.Kmat, st.R[o.cam], st.t[o.cam], P)
        return o.uv - uv, Jp, Jpose, z

    def loss_terms(self, st: State, r_sq: np.ndarray) -> float:
        pr = self.problem
        if pr.loss.kind == "cauchy":
            cost = float(cauchy_rho(r_sq, pr.loss.scale_px).sum())
        else:
            cost = float(r_sq.sum())
        if self.use_length:
            d = st.points[self.len_frames, -1] - st.points[self.len_frames, -2]
            cost += pr.lambda_length * float(((np.linalg.norm(d, axis=1) - pr.stick_length) ** 2).sum())
        if self.use_smooth:
            f, k = self.sm_f, self.sm_k
            a = st.points[f - 1, k] - 2 * st.points[f, k] + st.points[f + 1, k]
            cost += pr.lambda_smooth * float((a**2).sum())
        return cost

    def cost(self, st: State) -> float:
        """Objective value, ``inf`` if a visible point falls behind its camera."""
        r, _, _, z = self.reprojection(st)
        if np.any(z <= DEPTH_EPS):
            return np.inf
        return self.loss_terms(st, (r**2).sum(axis=1))

    def assemble(self, st: State) -> Assembly:
        lay, pr, o = self.layout, self.problem, self.o
        r, Jp, Jpose, z = self.reprojection(st)
        if np.any(z <= DEPTH_EPS):
            bad = int(np.argmin(z))
            raise DepthNonPositive(
                f"point (frame {o.frame[bad]}, keypoint {o.kp[bad]}) has depth {z[bad]:.3g} in camera {o.cam[bad]}"
            )
        r_sq = (r**2).sum(axis=1)
        w = cauchy_weight(r_sq, pr.loss.scale_px) if pr.loss.kind == "cauchy" else np.ones_like(r_sq)
        sw = np.sqrt(w)

        rows, cols, vals, res, blocks = [], [], [], [], []
        nobs = len(o.cam)
        # reprojection: 2 rows per observation
        base_row = 2 * np.arange(nobs)
        pcol = lay.point_col[o.frame, o.kp]
        for a in range(2):
            rr = base_row + a
            rows.append(np.repeat(rr, 3))
            cols.append((pcol[:, None] + np.arange(3)).ravel())
            vals.append((-Jp[:, a, :] * sw[:, None]).ravel())
            cam_ok = o.cam > 0
            rows.append(np.repeat(rr[cam_ok], 6))
            cols.append((6 * (o.cam[cam_ok] - 1)[:, None] + np.arange(6)).ravel())
            vals.append((-Jpose[cam_ok, a, :] * sw[cam_ok, None]).ravel())
        res.append((r * sw[:, None]).ravel())
        n_stick = int((o.kp >= lay.num_joints).sum())
        blocks.append((REPROJ_HUMAN, 0, 2 * (nobs - n_stick)))
        blocks.append((REPROJ_STICK, 2 * (nobs - n_stick), 2 * nobs))
        row = 2 * nobs

        if self.use_length and len(self.len_frames):
            sl = np.sqrt(pr.lambda_length)
            f = self.len_frames
            d = st.points[f, -1] - st.points[f, -2]
            ell = np.linalg.norm(d, axis=1)
            g = d / np.maximum(ell, LENGTH_EPS)[:, None]
            rr = row + np.arange(len(f))
            for e, sign in ((-2, -1.0), (-1, 1.0)):
                c0 = lay.point_col[f, lay.present.shape[1] + e]
                rows.append(np.repeat(rr, 3))
                cols.append((c0[:, None] + np.arange(3)).ravel())
                vals.append((sign * sl * g).ravel())
            res.append(sl * (ell - pr.stick_length))
            blocks.append((STICK_LENGTH, row, row + len(f)))
            row += len(f)

        if self.use_smooth and len(self.sm_f):
            ss = np.sqrt(pr.lambda_smooth)
            f, k = self.sm_f, self.sm_k
            a = st.points[f - 1, k] - 2 * st.points[f, k] + st.points[f + 1, k]
            n = len(f)
            rr = row + 3 * np.arange(n)
            for df, coef in ((-1, 1.0), (0, -2.0), (1, 1.0)):
                c0 = lay.point_col[f + df, k]
                for ax in range(3):
                    rows.append(rr + ax)
                    cols.append(c0 + ax)
                    vals.append(np.full(n, ss * coef))
            res.append(ss * a.ravel())
            n_h = int((k < lay.num_joints).sum())
            blocks.append((SMOOTH_HUMAN, row, row + 3 * n_h))
            blocks.append((SMOOTH_STICK, row + 3 * n_h, row + 3 * n))
            row += 3 * n

        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row, lay.size)
        )
        return Assembly(np.concatenate(res), J, w, self.loss_terms(st, r_sq), blocks)


def assemble(problem: Problem, rig: CameraRig, scene: SceneEstimate, layout: Optional[ParameterLayout] = None) -> Assembly:
    """Stacked weighted residuals and sparse Jacobian at ``(rig, scene)``."""
    if layout is None:
        layout = ParameterLayout.build(rig.num_cameras, problem.obs.num_joints, scene.present)
    elif not np.array_equal(layout.present, scene.present):
        raise InconsistentLayout("layout does not match the points present in the scene")
    return _Evaluator(problem, layout).assemble(State.from_estimate(rig, scene))


def objective(problem: Problem, rig: CameraRig, scene: SceneEstimate) -> float:
    layout = ParameterLayout.build(rig.num_cameras, problem.obs.num_joints, scene.present)
    return _Evaluator(problem, layout).cost(State.from_estimate(rig, scene))


def residual_blocks(problem: Problem, layout: ParameterLayout) -> list[ResidualBlock]:
    """Blocks in the row order used by :func:`assemble`."""
    ev = _Evaluator(problem, layout)
    J = layout.num_joints
    out = []
    for c, f, k in zip(ev.o.cam, ev.o.frame, ev.o.kp):
        if k < J:
            out.append(ResidualBlock(REPROJ_HUMAN, int(c), int(f), int(k)))
        else:
            out.append(ResidualBlock(REPROJ_STICK, int(c), int(f), int(k - J)))
    out.extend(ResidualBlock(STICK_LENGTH, frame=int(f)) for f in ev.len_frames)
    for f, k in zip(ev.sm_f, ev.sm_k):
        if k < J:
            out.append(ResidualBlock(SMOOTH_HUMAN, frame=int(f), keypoint=int(k)))
        else:
            out.append(ResidualBlock(SMOOTH_STICK, frame=int(f), keypoint=int(k - J)))
    return out


# --------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class SolveStats:
    iterations: int = 0
    accepted: int = 0
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    cost_trace: list = field(default_factory=list)
    termination: str = ""
    final_rms_px: float = float("nan")


class _CholmodSystem:
    """Damped normal equations ``(A + lam diag(A)) x = rhs`` solved with CHOLMOD.

    The pose columns are dense, so they are moved last before the lower
    triangle is handed over; CHOLMOD still applies its own fill-reducing
    ordering.  The symbolic analysis is reused while the sparsity pattern of
    ``A`` stays the same.
    """

    def __init__(self, n_pose: int):
        self.n_pose = n_pose
        self._key = None
        self._symbolic = None

    def set_matrix(self, A: sp.spmatrix) -> None:
        from cvxopt import cholmod, matrix, spmatrix

        n = A.shape[0]
        self.perm = np.r_[np.arange(self.n_pose, n), np.arange(self.n_pose)]
        L = sp.tril(A.tocsc()[self.perm][:, self.perm], format="csc")
        L.sort_indices()
        self.values = L.data.copy()
        # positions of the diagonal in CCS order
        rows = L.indices
        cols = np.repeat(np.arange(n), np.diff(L.indptr))
        self.diag_pos = np.flatnonzero(rows == cols)
        self.diag_idx = rows[self.diag_pos]
        key = (n, L.indptr.tobytes(), L.indices.tobytes())
        if key != self._key:
            coo = L.tocoo()
            self.S = spmatrix(matrix(coo.data), matrix(coo.row.astype(np.int64)), matrix(coo.col.astype(np.int64)), L.shape)
            self._symbolic = cholmod.symbolic(self.S, uplo="L")
            self._key = key

    def solve(self, lam: float, diag: np.ndarray, rhs: np.ndarray) -> Optional[np.ndarray]:
        from cvxopt import cholmod, matrix

        vals = self.values.copy()
        vals[self.diag_pos] += lam * diag[self.perm][self.diag_idx]
        self.S.V = matrix(vals)
        b = matrix(np.ascontiguousarray(rhs[self.perm], dtype=float))
        try:
            F = self._symbolic
            cholmod.numeric(self.S, F)
            cholmod.solve(F, b)
        except ArithmeticError:
            return None
        x = np.empty(len(rhs))
        x[self.perm] = np.array(b).ravel()
        return x


try:
    import cvxopt.cholmod  # noqa: F401

    _HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover
    _HAVE_CHOLMOD = False


class _DampedSolver:
    """Solves ``(A + lam diag(A)) delta = -g`` for a fixed ``A`` and varying ``lam``."""

    def __init__(self, n_pose: int):
        self.n_pose = n_pose
        self._cholmod = _CholmodSystem(n_pose) if _HAVE_CHOLMOD else None

    def set_matrix(self, A: sp.spmatrix, g: np.ndarray) -> None:
        self.A, self.g = A, g
        self.diag = np.maximum(A.diagonal(), 1e-12)
        n = A.shape[0]
        self.dense = n <= DENSE_SOLVE_MAX
        if self.dense:
            self.Ad = A.toarray()
        elif self._cholmod is not None:
            self._cholmod.set_matrix(A)

    def solve(self, lam: float) -> Optional[np.ndarray]:
        A, g, diag = self.A, self.g, self.diag
        n = A.shape[0]
        if self.dense:
            M = self.Ad.copy()
            M[np.diag_indices(n)] += lam * diag
            try:
                c, low = scipy.linalg.cho_factor(M, check_finite=False)
                x = -scipy.linalg.cho_solve((c, low), g, check_finite=False)
            except np.linalg.LinAlgError:
                return None
        elif self._cholmod is not None:
            x = self._cholmod.solve(lam, diag, -g)
        else:  # pragma: no cover - exercised only without cvxopt
            try:
                M = (A + sp.diags(lam * diag)).tocsc()
                lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
                x = -lu.solve(g)
            except RuntimeError:
                return None
        if x is None or not np.all(np.isfinite(x)):
            return None
        return x


def solve_lm(
    problem: Problem, rig: CameraRig, scene: SceneEstimate, cfg: SolverConfig = SolverConfig()
) -> tuple[CameraRig, SceneEstimate, SolveStats]:
    """Levenberg-Marquardt over poses (left exp-map updates) and points."""
    layout = ParameterLayout.build(rig.num_cameras, problem.obs.num_joints, scene.present)
    ev = _Evaluator(problem, layout)
    st = State.from_estimate(rig, scene)
    stats = SolveStats()
    asm = ev.assemble(st)
    cost = asm.cost
    stats.initial_cost = cost
    stats.cost_trace.append(cost)
    lam = cfg.initial_damping
    solver = _DampedSolver(layout.num_pose_params)

    while True:
        g = asm.jacobian.T @ asm.residuals
        if layout.size == 0 or np.abs(g).max() <= cfg.gradient_tol:
            stats.termination = "gradient"
            break
        if stats.iterations >= cfg.max_iterations:
            stats.termination = "max_iterations"
            break
        solver.set_matrix((asm.jacobian.T @ asm.jacobian).tocsc(), g)
        accepted = False
        while stats.iterations < cfg.max_iterations:
            stats.iterations += 1
            delta = solver.solve(lam)
            if delta is None:
                lam *= cfg.damping_up
                if lam > MAX_DAMPING:
                    raise NumericalFailure("linear solve failed at maximum damping")
                continue
            if np.linalg.norm(delta) <= cfg.step_tol * (st.param_norm(layout) + cfg.step_tol):
                stats.termination = "step"
                break
            trial = st.stepped(layout, delta)
            new_cost = ev.cost(trial)
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                st, cost = trial, new_cost
                lam = max(lam / cfg.damping_down, 1e-15)
                stats.accepted += 1
                stats.cost_trace.append(cost)
                accepted = True
                if rel <= cfg.cost_tol:
                    stats.termination = "cost"
                break
            lam *= cfg.damping_up
            if lam > MAX_DAMPING:
                stats.termination = "damping"
                break
        if stats.termination:
            break
        if not accepted:
            stats.termination = "max_iterations"
            break
        asm = ev.assemble(st)
        cost = asm.cost

    stats.final_cost = cost
    r, _, _, _ = ev.reprojection(st)
    stats.final_rms_px = float(np.sqrt((r**2).sum(axis=1).mean())) if len(r) else 0.0
    out_rig, out_scene = st.to_estimate(rig, problem.obs.num_joints)
    return out_rig, out_scene, stats


# --------------------------------------------------------------------------
# closed-form scale


def stick_lengths(scene: SceneEstimate) -> np.ndarray:
    """Per-frame reconstructed stick length over frames where both endpoints exist."""
    d = scene.stick_3d[:, 1] - scene.stick_3d[:, 0]
    ok = np.all(np.isfinite(d), axis=1)
    return np.linalg.norm(d[ok], axis=1)


def robust_mean(values: np.ndarray, k: float = 3.0) -> float:
    """Mean after discarding values more than ``k`` MADs from the median."""
    med = np.median(values)
    mad = np.median(np.abs(values - med))
    if mad > 0:
        values = values[np.abs(values - med) <= k * mad]
    return float(values.mean())


def recover_scale(scene: SceneEstimate, L: float, mad_k: Optional[float] = 3.0) -> float:
    """``s = L / mean reconstructed stick length``."""
    lengths = stick_lengths(scene)
    if len(lengths) == 0:
        raise NoStickFrames("no frame has both stick endpoints")
    Lbar = robust_mean(lengths, mad_k) if mad_k is not None else float(lengths.mean())
    if Lbar < 1e-9:
        raise DegenerateLength(f"mean reconstructed length {Lbar:.3g} m is degenerate")
    return L / Lbar


def apply_scale(rig: CameraRig, scene: SceneEstimate, s: float) -> tuple[CameraRig, SceneEstimate]:
    return rig.scaled(s), scene.scaled(s)
