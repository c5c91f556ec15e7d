"""Cross-sequence pose refinement: pairwise ICP plus SE(3) pose-graph optimization.

Edge residual for ``(a, b, Z)`` is ``log(Z⁻¹ · T_a⁻¹ · T_b)`` with tangent
order (rotation, translation); node updates are left perturbations
``T ← Exp(δ) · T``.  The cost is ``Σ rᵀ Ω r`` over edges.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Hashable, Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._workers import max_workers
from .geometry import (
    Pose,
    PointCloud,
    adjoint,
    compose,
    invert,
    se3_exp,
    se3_log,
    se3_right_jacobian,
)
from .map_store import tile_index

log = logging.getLogger(__name__)

DEFAULT_CORRESPONDENCE_DISTANCE = 2.0


class NoOverlapError(RuntimeError):
    """Raised when ICP finds no correspondences under the initial guess."""


class DisconnectedGraphError(ValueError):
    def __init__(self, components):
        self.components = components
        listing = "; ".join("{" + ", ".join(map(str, c)) + "}" for c in components)
        super().__init__(f"pose graph is disconnected: {len(components)} components: {listing}")


# --- ICP ----------------------------------------------------------------------


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (Kabsch/Umeyama, no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = mu_d - R @ mu_s
    return Pose.from_matrix(m)


@dataclass(frozen=True)
class ICPResult:
    relative: Pose  # maps source coordinates into the target frame
    rmse: float
    inlier_fraction: float
    iterations: int
    threshold: float


def icp_register(
    source: PointCloud,
    target: PointCloud,
    init: Pose = Pose(),
    max_iter: int = 100,
    tol: float = 1e-10,
    threshold: float = DEFAULT_CORRESPONDENCE_DISTANCE,
    min_threshold: Optional[float] = None,
) -> ICPResult:
    """Point-to-point ICP from ``source`` onto ``target``.

    Each iteration pairs every transformed source point with its nearest
    target point closer than the current threshold and re-solves the rigid
    transform in closed form.  When the update falls below ``tol`` the
    threshold halves, down to ``min_threshold`` (default ``threshold / 8``).
    """
    src = source.positions
    dst = target.positions
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("ICP needs non-empty source and target clouds")
    if min_threshold is None:
        min_threshold = threshold / 8.0
    tree = cKDTree(dst)
    T = init
    thr = float(threshold)

    def match(T, thr):
        d, idx = tree.query(T.apply(src), distance_upper_bound=thr)
        ok = np.isfinite(d)
        return d, idx, ok

    d, idx, ok = match(T, thr)
    if not ok.any():
        raise NoOverlapError("no overlap under initial guess")

    it = 0
    while it < max_iter:
        it += 1
        if ok.sum() < 3:
            break
        T_new = rigid_fit(src[ok], dst[idx[ok]])
        step = se3_log(compose(T_new, invert(T)))
        T = T_new
        d, idx, ok = match(T, thr)
        if np.linalg.norm(step) < tol:
            if thr * 0.5 < min_threshold:
                break
            thr *= 0.5
            d, idx, ok = match(T, thr)
    n_ok = int(ok.sum())
    rmse = float(np.sqrt(np.mean(d[ok] ** 2))) if n_ok else float("inf")
    return ICPResult(T, rmse, n_ok / len(src), it, thr)


# --- pose graph ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Edge:
    a: Hashable
    b: Hashable
    measured: Pose  # expected T_a⁻¹ T_b
    information: np.ndarray = field(default_factory=lambda: np.eye(6))

    def __post_init__(self):
        W = np.asarray(self.information, dtype=np.float64).reshape(6, 6)
        if not np.allclose(W, W.T, atol=1e-12):
            raise ValueError("edge information must be symmetric")
        if np.linalg.eigvalsh(W).min() <= 0:
            raise ValueError("edge information must be positive definite")
        object.__setattr__(self, "information", W)


@dataclass(eq=False)
class PoseGraph:
    nodes: dict = field(default_factory=dict)  # id -> Pose (global)
    edges: list = field(default_factory=list)

    def add_edge(self, a, b, measured: Pose, information=None) -> None:
        if a not in self.nodes or b not in self.nodes:
            raise KeyError(f"edge ({a}, {b}) references an unknown node")
        self.edges.append(Edge(a, b, measured, np.eye(6) if information is None else information))

    def components(self) -> list[list]:
        ids = list(self.nodes)
        pos = {k: i for i, k in enumerate(ids)}
        if not self.edges:
            return [[k] for k in ids]
        rows = [pos[e.a] for e in self.edges]
        cols = [pos[e.b] for e in self.edges]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
        n, labels = connected_components(adj, directed=False)
        return [[ids[i] for i in np.flatnonzero(labels == c)] for c in range(n)]


def edge_residual(e: Edge, Ta: Pose, Tb: Pose) -> np.ndarray:
    return se3_log(compose(invert(e.measured), compose(invert(Ta), Tb)))


def graph_cost(g: PoseGraph, nodes: Optional[dict] = None) -> float:
    nodes = g.nodes if nodes is None else nodes
    total = 0.0
    for e in g.edges:
        r = edge_residual(e, nodes[e.a], nodes[e.b])
        total += float(r @ e.information @ r)
    return total


def _edge_jacobians(e: Edge, Ta: Pose, Tb: Pose, r: np.ndarray):
    # Left perturbation of T_b: E·Exp(Ad(T_b⁻¹)δ); of T_a: E·Exp(-Ad(T_b⁻¹)δ).
    Jr_inv = np.linalg.inv(se3_right_jacobian(r))
    Jb = Jr_inv @ adjoint(invert(Tb))
    return -Jb, Jb


@dataclass
class OptimizationResult:
    graph: PoseGraph
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    cost_trace: list = field(default_factory=list)  # cost after each accepted step

    @property
    def status(self) -> str:
        return "converged" if self.converged else "max_iter"


def optimize_pose_graph(
    g: PoseGraph,
    fixed,
    max_iter: int = 100,
    tol: float = 1e-12,
    lambda_init: float = 1e-6,
) -> OptimizationResult:
    """Gauss–Newton with multiplicative Levenberg damping when a step raises the cost.

    ``fixed`` is held constant to pin the gauge.  If ``max_iter`` is reached
    before convergence a ``RuntimeWarning`` is issued and the best iterate is
    returned with ``converged=False``.
    """
    if fixed not in g.nodes:
        raise KeyError(f"fixed node {fixed!r} is not in the graph")
    comps = g.components()
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)

    free = [k for k in g.nodes if k != fixed]
    col = {k: 6 * i for i, k in enumerate(free)}
    nodes = dict(g.nodes)
    cost = graph_cost(g, nodes)
    initial = cost
    trace = [cost]
    lam = 0.0
    converged = not free or not g.edges
    it = 0
    while not converged and it < max_iter:
        it += 1
        n = 6 * len(free)
        H = np.zeros((n, n))
        b = np.zeros(n)
        for e in g.edges:
            Ta, Tb = nodes[e.a], nodes[e.b]
            r = edge_residual(e, Ta, Tb)
            Ja, Jb = _edge_jacobians(e, Ta, Tb, r)
            W = e.information
            blocks = [(e.a, Ja), (e.b, Jb)]
            for ka, Ja_ in blocks:
                if ka not in col:
                    continue
                ia = col[ka]
                b[ia:ia + 6] += Ja_.T @ W @ r
                for kb, Jb_ in blocks:
                    if kb not in col:
                        continue
                    ib = col[kb]
                    H[ia:ia + 6, ib:ib + 6] += Ja_.T @ W @ Jb_
        diag = np.diag(H).copy()
        while True:
            A = H + lam * np.diag(np.maximum(diag, 1e-12)) if lam > 0 else H
            try:
                delta = np.linalg.solve(A, -b)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(A, -b, rcond=None)[0]
            trial = dict(nodes)
            for k in free:
                i = col[k]
                trial[k] = compose(se3_exp(delta[i:i + 6]), nodes[k])
            new_cost = graph_cost(g, trial)
            if new_cost <= cost:
                break
            lam = lambda_init if lam == 0 else lam * 10.0
            if lam > 1e12:
                new_cost, delta, trial = cost, np.zeros_like(delta), nodes
                break
        improvement = cost - new_cost
        nodes, cost = trial, new_cost
        trace.append(cost)
        lam = lam / 10.0 if lam > lambda_init else 0.0
        if np.linalg.norm(delta) < tol or improvement <= tol * max(initial, 1e-300):
            converged = True

    if not converged:
        warnings.warn(
            f"pose graph optimization stopped after {max_iter} iterations "
            f"(initial cost {initial:.6g}, final cost {cost:.6g})",
            RuntimeWarning,
        )
    out = PoseGraph(nodes, list(g.edges))
    return OptimizationResult(out, initial, cost, it, converged, trace)


# --- graph file ---------------------------------------------------------------
#
#   NODE id qx qy qz qw tx ty tz
#   EDGE a b qx qy qz qw tx ty tz w11 w12 .. w16 w22 .. w66   (upper triangle, row-major)


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_graph(path, g: PoseGraph) -> None:
    iu = np.triu_indices(6)
    lines = [f"NODE {k} {_fmt(p.as_array())}" for k, p in g.nodes.items()]
    lines += [f"EDGE {e.a} {e.b} {_fmt(e.measured.as_array())} {_fmt(e.information[iu])}" for e in g.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> PoseGraph:
    g = PoseGraph()
    iu = np.triu_indices(6)
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "NODE" and len(parts) == 9:
            g.nodes[parts[1]] = Pose.from_array([float(x) for x in parts[2:]])
        elif parts[0] == "EDGE" and len(parts) == 31:
            W = np.zeros((6, 6))
            W[iu] = [float(x) for x in parts[10:]]
            W = W + np.triu(W, 1).T
            edges.append((parts[1], parts[2], Pose.from_array([float(x) for x in parts[3:10]]), W))
        else:
            raise ValueError(f"{path}:{lineno}: malformed record")
    for a, b, Z, W in edges:
        g.add_edge(a, b, Z, W)
    return g


# --- sequence alignment ---------------------------------------------------------


def overlapping_pairs(clouds: dict, poses: dict, tile_size: float = 50.0) -> list[tuple]:
    """Sequence pairs whose global tile footprints share at least one tile."""
    footprints = {}
    for k, cloud in clouds.items():
        g = poses[k].apply(cloud.positions)
        footprints[k] = set(map(tuple, tile_index(g, tile_size).tolist())) if len(g) else set()
    return [(a, b) for a, b in combinations(sorted(clouds, key=str), 2) if footprints[a] & footprints[b]]


@dataclass
class AlignmentResult:
    poses: dict  # corrected global poses per sequence
    graph: PoseGraph
    registrations: dict  # (a, b) -> ICPResult
    optimization: OptimizationResult


def align_sequences(
    clouds: dict,
    poses: dict,
    fixed=None,
    tile_size: float = 50.0,
    threshold: float = DEFAULT_CORRESPONDENCE_DISTANCE,
    max_iter: int = 100,
    workers: Optional[int] = None,
) -> AlignmentResult:
    """Refine per-sequence global poses.

    ``clouds[s]`` is expressed in the frame of ``poses[s]``.  Each overlapping
    pair is registered with ICP starting from the current relative pose; the
    edge information is the identity scaled by the ICP inlier fraction.
    """
    keys = sorted(clouds, key=str)
    if fixed is None:
        fixed = keys[0]
    pairs = overlapping_pairs(clouds, poses, tile_size)

    def register(pair):
        a, b = pair
        init = compose(invert(poses[a]), poses[b])
        return pair, icp_register(clouds[b], clouds[a], init, max_iter=max_iter, threshold=threshold)

    with ThreadPoolExecutor(max_workers=workers or max_workers()) as pool:
        regs = dict(pool.map(register, pairs))

    g = PoseGraph({k: poses[k] for k in keys})
    for (a, b), res in regs.items():
        g.add_edge(a, b, res.relative, np.eye(6) * max(res.inlier_fraction, 1e-6))
    opt = optimize_pose_graph(g, fixed)
    return AlignmentResult(dict(opt.graph.nodes), opt.graph, regs, opt)
