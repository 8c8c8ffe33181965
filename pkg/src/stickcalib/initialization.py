"""Initial rig and structure: pairwise essential matrices, spanning-tree
propagation from camera 0 and linear triangulation."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import least_squares

from .errors import (
    CheiralityAmbiguous,
    DegenerateConfiguration,
    DisconnectedGraph,
    TooFewCorrespondences,
)
from .geometry import Intrinsics, Pose, exp_so3, orthonormalize, skew
from .scene import CameraRig, ObservationSet, SceneEstimate, shared_arrays

log = logging.getLogger(__name__)

_MIN_SAMPLE = 8
_CHUNK = 64


@dataclass(frozen=True)
class RansacConfig:
    threshold_px: float = 1.0
    confidence: float = 0.999
    max_iterations: int = 2000
    min_inliers: int = 15
    min_shared: int = 20
    seed: int = 0


@dataclass(frozen=True, eq=False)
class PairwiseRelativePose:
    """Relative pose ``x_j = R x_i + t_dir`` with a unit-norm translation."""

    cam_i: int
    cam_j: int
    rotation: np.ndarray
    translation_dir: np.ndarray
    inlier_count: int
    inlier_ids: frozenset = field(default_factory=frozenset)

    def oriented(self, parent: int) -> tuple[np.ndarray, np.ndarray]:
        """(R, t) taking ``parent``'s frame to the other camera's frame."""
        if parent == self.cam_i:
            return self.rotation, self.translation_dir
        if parent == self.cam_j:
            return self.rotation.T, -self.rotation.T @ self.translation_dir
        raise ValueError(f"camera {parent} is not on edge ({self.cam_i}, {self.cam_j})")


@dataclass
class OverlapGraph:
    num_cameras: int
    edges: dict[tuple[int, int], PairwiseRelativePose] = field(default_factory=dict)

    def weight(self, i: int, j: int) -> int:
        return self.edges[(min(i, j), max(i, j))].inlier_count

    def is_connected(self) -> bool:
        if self.num_cameras == 0:
            return True
        adj = {i: set() for i in range(self.num_cameras)}
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        seen, stack = {0}, [0]
        while stack:
            for n in adj[stack.pop()] - seen:
                seen.add(n)
                stack.append(n)
        return len(seen) == self.num_cameras


# --------------------------------------------------------------------------
# two-view geometry


def normalize_points(x: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Pixel (N, 2) to normalized image coordinates (N, 2)."""
    xh = np.column_stack([x, np.ones(len(x))]) @ K.K_inv.T
    return xh[:, :2] / xh[:, 2:]


def _hartley(x: np.ndarray) -> np.ndarray:
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _eight_point_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rows of the linear system ``b^T E a = 0`` for (..., 2) point arrays."""
    x1, y1 = a[..., 0], a[..., 1]
    x2, y2 = b[..., 0], b[..., 1]
    one = np.ones_like(x1)
    return np.stack([x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, one], axis=-1)


def _project_to_essential(E: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(E)
    return (U * np.array([1.0, 1.0, 0.0])) @ Vt


def _sampson_px(F: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sampson distance (pixels) for models F (B, 3, 3) and pixel points a, b (N, 2)."""
    ah = np.column_stack([a, np.ones(len(a))])
    bh = np.column_stack([b, np.ones(len(b))])
    Fa = ah @ F.transpose(0, 2, 1)  # (B, N, 3) rows F a
    Ftb = bh @ F  # (B, N, 3) rows F^T b
    num = (Fa * bh).sum(axis=2)
    den = Fa[..., 0] ** 2 + Fa[..., 1] ** 2 + Ftb[..., 0] ** 2 + Ftb[..., 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def _fit_essential(a_n: np.ndarray, b_n: np.ndarray) -> np.ndarray:
    """Normalized eight-point fit on normalized coordinates (least squares for N > 8)."""
    Ta, Tb = _hartley(a_n), _hartley(b_n)
    a = a_n @ Ta[:2, :2].T + Ta[:2, 2]
    b = b_n @ Tb[:2, :2].T + Tb[:2, 2]
    A = _eight_point_rows(a, b)
    E = np.linalg.svd(A)[2][-1].reshape(3, 3)
    E = Tb.T @ E @ Ta
    return _project_to_essential(E)


def _sampson_signed(F: np.ndarray, ah: np.ndarray, bh: np.ndarray) -> np.ndarray:
    Fa = ah @ F.T
    Ftb = bh @ F
    den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
    return (Fa * bh).sum(axis=1) / np.sqrt(np.maximum(den, 1e-300))


def _refine_essential(
    E: np.ndarray, x_i: np.ndarray, x_j: np.ndarray, K_i: Intrinsics, K_j: Intrinsics, scale_px: float
) -> np.ndarray:
    """Minimize a Cauchy-robustified pixel Sampson distance over (R, t̂).

    The linear eight-point estimate is poorly conditioned when the keypoints
    cover a small part of the image, so the consensus model is polished on
    the manifold of essential matrices before scoring.
    """
    U, _, Vt = np.linalg.svd(E)
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R0 = U @ W @ Vt
    R0 = R0 * np.sign(np.linalg.det(R0))
    t0 = U[:, 2]
    # tangent basis of the unit sphere at t0
    basis = np.linalg.svd(t0[None])[2][1:]
    ah = np.column_stack([x_i, np.ones(len(x_i))])
    bh = np.column_stack([x_j, np.ones(len(x_j))])
    Kj_inv_T, Ki_inv = K_j.K_inv.T, K_i.K_inv

    def unpack(p):
        t = t0 + basis.T @ p[3:]
        return exp_so3(p[:3]) @ R0, t / np.linalg.norm(t)

    def fun(p):
        R, t = unpack(p)
        return _sampson_signed(Kj_inv_T @ skew(t) @ R @ Ki_inv, ah, bh)

    sol = least_squares(fun, np.zeros(5), loss="cauchy", f_scale=scale_px, method="trf", max_nfev=50)
    R, t = unpack(sol.x)
    return skew(t) @ R


def estimate_essential(
    x_i: np.ndarray,
    x_j: np.ndarray,
    K_i: Intrinsics,
    K_j: Intrinsics,
    cfg: RansacConfig = RansacConfig(),
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC essential matrix from pixel correspondences.

    Returns ``E`` (singular values (1, 1, 0)) with ``x̂_j^T E x̂_i = 0`` in
    normalized coordinates, and a boolean inlier mask (Sampson distance in
    pixels below ``cfg.threshold_px``).
    """
    x_i = np.asarray(x_i, dtype=float).reshape(-1, 2)
    x_j = np.asarray(x_j, dtype=float).reshape(-1, 2)
    N = len(x_i)
    if N < _MIN_SAMPLE:
        raise TooFewCorrespondences(f"{N} correspondences, need at least {_MIN_SAMPLE}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng

    a_n, b_n = normalize_points(x_i, K_i), normalize_points(x_j, K_j)
    Ta, Tb = _hartley(a_n), _hartley(b_n)
    a = a_n @ Ta[:2, :2].T + Ta[:2, 2]
    b = b_n @ Tb[:2, :2].T + Tb[:2, 2]
    rows = _eight_point_rows(a, b)
    Kj_inv_T, Ki_inv = K_j.K_inv.T, K_i.K_inv

    best_count, best_E, best_err = -1, None, np.inf
    done, needed = 0, cfg.max_iterations
    while done < min(needed, cfg.max_iterations):
        B = min(_CHUNK, cfg.max_iterations - done)
        idx = np.argpartition(rng.random((B, N)), _MIN_SAMPLE, axis=1)[:, :_MIN_SAMPLE]
        A = rows[idx]  # (B, 8, 9)
        E = np.linalg.svd(A)[2][:, -1].reshape(B, 3, 3)
        E = _project_to_essential(Tb.T @ E @ Ta)
        err = _sampson_px(Kj_inv_T @ E @ Ki_inv, x_i, x_j)
        inl = err < cfg.threshold_px
        counts = inl.sum(axis=1)
        scores = np.where(inl, err, 0.0).sum(axis=1)
        prev = best_count
        for k in range(B):
            if counts[k] > best_count or (counts[k] == best_count and scores[k] < best_err):
                best_count, best_E, best_err = int(counts[k]), E[k], float(scores[k])
        if best_count > prev and best_count >= _MIN_SAMPLE:
            # local optimization: polish the new best model on all correspondences
            E_lo = _refine_essential(best_E, x_i, x_j, K_i, K_j, cfg.threshold_px)
            e_lo = _sampson_px((Kj_inv_T @ E_lo @ Ki_inv)[None], x_i, x_j)[0]
            c_lo = int((e_lo < cfg.threshold_px).sum())
            if c_lo > best_count:
                best_count, best_E = c_lo, E_lo
                best_err = float(e_lo[e_lo < cfg.threshold_px].sum())
        done += B
        w = best_count / N
        if w >= 1.0:
            needed = done
        elif w > 0:
            denom = np.log(max(1.0 - w**_MIN_SAMPLE, 1e-300))
            needed = int(np.ceil(np.log(1.0 - cfg.confidence) / denom)) if denom < 0 else cfg.max_iterations

    if best_count < max(cfg.min_inliers, _MIN_SAMPLE):
        raise DegenerateConfiguration(f"best model has {best_count} inliers (< {cfg.min_inliers})")

    E = _refine_essential(best_E, x_i, x_j, K_i, K_j, cfg.threshold_px)
    inliers = _sampson_px((Kj_inv_T @ E @ Ki_inv)[None], x_i, x_j)[0] < cfg.threshold_px
    if inliers.sum() < best_count:
        E = best_E
        inliers = _sampson_px((Kj_inv_T @ E @ Ki_inv)[None], x_i, x_j)[0] < cfg.threshold_px
    return E, inliers


def triangulate_linear(P: np.ndarray, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Batched homogeneous DLT.

    ``P`` (M, 3, 4) normalized projection matrices, ``x`` (N, M, 2) normalized
    image points, ``mask`` (N, M) visibility.  Returns (N, 3); rows with fewer
    than two views or a point at infinity are NaN.
    """
    N, M = x.shape[:2]
    mask = np.ones((N, M), dtype=bool) if mask is None else mask
    xs = np.where(mask[..., None], x, 0.0)
    r1 = xs[..., 0:1] * P[None, :, 2, :] - P[None, :, 0, :]
    r2 = xs[..., 1:2] * P[None, :, 2, :] - P[None, :, 1, :]
    A = np.stack([r1, r2], axis=2) * mask[..., None, None]
    A = A.reshape(N, 2 * M, 4)
    out = np.full((N, 3), np.nan)
    ok = mask.sum(axis=1) >= 2
    if ok.any():
        Xh = np.linalg.svd(A[ok])[2][:, -1]
        w = Xh[:, 3]
        good = np.abs(w) > 1e-12 * np.abs(Xh[:, :3]).max(axis=1)
        X = np.full((len(Xh), 3), np.nan)
        X[good] = Xh[good, :3] / w[good, None]
        out[ok] = X
    return out


def decompose_essential(
    E: np.ndarray, x_i: np.ndarray, x_j: np.ndarray, K_i: Intrinsics, K_j: Intrinsics,
    cam_i: int = 0, cam_j: int = 1, inlier_ids=(),
) -> PairwiseRelativePose:
    """Pick the (R, t) of the four decompositions with the most points in front of both cameras."""
    a = normalize_points(np.asarray(x_i, dtype=float).reshape(-1, 2), K_i)
    b = normalize_points(np.asarray(x_j, dtype=float).reshape(-1, 2), K_j)
    if len(a) < 1:
        raise DegenerateConfiguration("no inliers to disambiguate the decomposition")
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    candidates = [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]
    xs = np.stack([a, b], axis=1)
    votes = []
    for R, tt in candidates:
        P = np.stack([np.hstack([np.eye(3), np.zeros((3, 1))]), np.hstack([R, tt[:, None]])])
        X = triangulate_linear(P, xs)
        z_i = X[:, 2]
        z_j = (X @ R.T + tt)[:, 2]
        votes.append(int(np.sum((z_i > 0) & (z_j > 0))))
    best = int(np.argmax(votes))
    if sorted(votes)[-1] == sorted(votes)[-2]:
        raise CheiralityAmbiguous(f"cheirality votes tie: {votes}")
    R, tt = candidates[best]
    R = orthonormalize(R)
    return PairwiseRelativePose(
        cam_i, cam_j, R, tt / np.linalg.norm(tt), int(len(a)), frozenset(int(i) for i in inlier_ids)
    )


def build_overlap_graph(obs: ObservationSet, cfg: RansacConfig = RansacConfig()) -> OverlapGraph:
    """Estimate relative poses for every camera pair with enough shared keypoints."""
    graph = OverlapGraph(obs.num_cameras)
    for i, j in combinations(range(obs.num_cameras), 2):
        ids, x_i, x_j = shared_arrays(obs, i, j)
        if len(ids) < cfg.min_shared:
            continue
        # independent stream per pair so results do not depend on pair order
        rng = np.random.default_rng([cfg.seed, i, j])
        K_i, K_j = obs.intrinsics[i], obs.intrinsics[j]
        try:
            E, inl = estimate_essential(x_i, x_j, K_i, K_j, cfg, rng)
            rel = decompose_essential(E, x_i[inl], x_j[inl], K_i, K_j, i, j, np.flatnonzero(inl))
        except (DegenerateConfiguration, CheiralityAmbiguous, TooFewCorrespondences) as exc:
            log.warning("dropping pair (%d, %d): %s", i, j, exc)
            continue
        graph.edges[(i, j)] = rel
    return graph


def build_spanning_tree(graph: OverlapGraph, root: int = 0) -> list[tuple[int, int]]:
    """Maximum spanning tree by inlier count, as (parent, child) edges in BFS order from ``root``.

    Kruskal with ties broken by the smaller camera index, then the larger one.
    """
    order = sorted(graph.edges.items(), key=lambda kv: (-kv[1].inlier_count, kv[0][0], kv[0][1]))
    parent = list(range(graph.num_cameras))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    adj: dict[int, list[int]] = {i: [] for i in range(graph.num_cameras)}
    n_edges = 0
    for (i, j), _ in order:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            adj[i].append(j)
            adj[j].append(i)
            n_edges += 1
    if n_edges != graph.num_cameras - 1:
        raise DisconnectedGraph(f"overlap graph has {graph.num_cameras - 1 - n_edges + 1} components")

    tree, seen, queue = [], {root}, deque([root])
    while queue:
        p = queue.popleft()
        for c in sorted(adj[p]):
            if c not in seen:
                seen.add(c)
                tree.append((p, c))
                queue.append(c)
    return tree


def _edge_scale(
    obs: ObservationSet, placed: dict[int, Pose], p: int, c: int, R_pc: np.ndarray, t_pc: np.ndarray
) -> float | None:
    """Median depth ratio between placed-rig and unit-baseline pair triangulations."""
    masks = obs.masks
    cams = sorted(placed)
    placed_views = masks[cams].sum(axis=0)
    cells = masks[p] & masks[c] & (placed_views >= 2)
    if not cells.any():
        return None
    kp = obs.keypoints_2d
    xn = np.stack(
        [normalize_points(kp[m][cells], obs.intrinsics[m]) for m in cams], axis=1
    )
    P = np.stack([np.hstack([placed[m].R, placed[m].t[:, None]]) for m in cams])
    X_world = triangulate_linear(P, xn, masks[cams][:, cells].T)
    z_rig = (X_world @ placed[p].R.T + placed[p].t)[:, 2]

    pair_x = np.stack([normalize_points(kp[p][cells], obs.intrinsics[p]),
                       normalize_points(kp[c][cells], obs.intrinsics[c])], axis=1)
    P_pair = np.stack([np.hstack([np.eye(3), np.zeros((3, 1))]), np.hstack([R_pc, t_pc[:, None]])])
    z_pair = triangulate_linear(P_pair, pair_x)[:, 2]
    ok = np.isfinite(z_rig) & np.isfinite(z_pair) & (z_rig > 0) & (z_pair > 0)
    if not ok.any():
        return None
    return float(np.median(z_rig[ok] / z_pair[ok]))


def propagate_poses(
    tree: list[tuple[int, int]], graph: OverlapGraph, obs: ObservationSet
) -> tuple[CameraRig, list[str]]:
    """Chain relative poses from camera 0 along the tree.

    The first edge keeps its unit baseline; every later edge is rescaled so its
    two-view depths agree with points triangulated from the cameras already
    placed.  Returns the rig and a list of diagnostics.
    """
    C = graph.num_cameras
    placed: dict[int, Pose] = {0: Pose.identity()}
    notes: list[str] = []
    for n, (p, c) in enumerate(tree):
        rel = graph.edges[(min(p, c), max(p, c))]
        R_pc, t_pc = rel.oriented(p)
        scale = 1.0
        if n > 0:
            s = _edge_scale(obs, placed, p, c, R_pc, t_pc)
            if s is None or not np.isfinite(s) or s <= 0:
                notes.append(f"edge ({p}, {c}): no shared triangulated keypoints, unit baseline assumed")
            else:
                scale = s
        Pp = placed[p]
        placed[c] = Pose(orthonormalize(R_pc @ Pp.R), R_pc @ Pp.t + scale * t_pc)
    for note in notes:
        log.warning(note)
    rig = CameraRig(tuple(placed[i] for i in range(C)), obs.intrinsics)
    return rig, notes


def triangulate_dlt(rig: CameraRig, obs: ObservationSet) -> SceneEstimate:
    """Triangulate every (frame, keypoint) cell visible in at least two cameras."""
    C, F, Kp = obs.masks.shape
    kp = obs.keypoints_2d
    xn = np.empty((C, F, Kp, 2))
    for i in range(C):
        flat = kp[i].reshape(-1, 2)
        xn[i] = normalize_points(np.nan_to_num(flat), obs.intrinsics[i]).reshape(F, Kp, 2)
    x = xn.reshape(C, F * Kp, 2).transpose(1, 0, 2)
    m = obs.masks.reshape(C, F * Kp).T
    X = triangulate_linear(rig.projection_matrices(), x, m)
    return SceneEstimate.from_points(X.reshape(F, Kp, 3), obs.num_joints)


@dataclass
class Initialization:
    rig: CameraRig
    scene: SceneEstimate
    graph: OverlapGraph
    tree: list[tuple[int, int]]
    notes: list[str]


def initialize(obs: ObservationSet, cfg: RansacConfig = RansacConfig()) -> Initialization:
    graph = build_overlap_graph(obs, cfg)
    if not graph.is_connected():
        raise DisconnectedGraph("overlap graph is not connected after pairwise estimation")
    tree = build_spanning_tree(graph)
    rig, notes = propagate_poses(tree, graph, obs)
    scene = triangulate_dlt(rig, obs)
    return Initialization(rig, scene, graph, tree, notes)
