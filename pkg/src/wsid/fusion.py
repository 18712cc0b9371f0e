"""Instance fusion: seeded random walker over the salient pixel graph.

Each centroid seeds one label; a virtual background node is tied to the
rim of the salient region. For every label the harmonic (Dirichlet)
solution gives the probability that a walker starting at a pixel reaches
that label's seeds first, and each pixel takes the most likely label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import LinearOperator, cg

from . import centroids as cf
from .evaluation import Detection

BETA = 8.0
RIM_WEIGHT = 0.01
MIN_AREA = 8
CG_TOL = 1e-8
SCORE_FLOOR = 1e-3

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class SingularGraphError(ValueError):
    pass


@dataclass
class PixelGraph:
    shape: tuple[int, int]
    nodes: np.ndarray  # [H,W] bool, pixels in the graph
    index: np.ndarray  # [H,W] int node id or -1
    edges: np.ndarray  # [E,2] node ids (i < j)
    weights: np.ndarray  # [E]
    bg_weights: np.ndarray  # [n] link to the virtual background seed (0 if none)
    seeds: np.ndarray  # [n] int: 0 unseeded, k >= 1 seeded with label k
    seed_points: list[tuple[int, int]]  # (y, x) of label k at position k-1
    seed_mass: np.ndarray  # [K]
    fallback: np.ndarray  # [K] bool, seed came from a centroidless component

    @property
    def n_labels(self) -> int:
        return len(self.seed_points)

    @property
    def n_nodes(self) -> int:
        return len(self.seeds)


def _snap(y: int, x: int, nodes: np.ndarray, near: tuple[np.ndarray, np.ndarray]) -> tuple[int, int]:
    if nodes[y, x]:
        return y, x
    return int(near[0][y, x]), int(near[1][y, x])


def build_graph(S, B, centroids: cf.CentroidSet | None, tau_s: float = cf.TAU_S, beta: float = BETA,
                acc: np.ndarray | None = None, rim_weight: float = RIM_WEIGHT, min_area: int = MIN_AREA,
                fallback: bool = True) -> PixelGraph:
    """Graph over {S >= tau_s} with weights exp(-beta * max(B_i, B_j)).

    Centroids off the salient set (or on a boundary pixel, B >= 0.5) snap
    to the nearest salient pixel with B < 0.5 (any salient pixel if there is
    none); two centroids landing on one pixel keep the heavier. Rim pixels (salient
    with a non-salient 4-neighbour) link to the background seed with weight
    ``rim_weight * exp(-beta * B_i)``. A component without any centroid gets
    a fallback seed at its vote-mass argmax (``acc``; saliency argmax if no
    accumulator) when it has at least ``min_area`` pixels, otherwise it is
    left out of the graph.
    """
    S = np.asarray(S, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if S.ndim != 2 or B.shape != S.shape:
        raise ValueError(f"build_graph: S {S.shape} and B {B.shape} must be equal 2-D shapes")
    if beta < 0:
        raise ValueError("build_graph: beta must be >= 0")
    H, W = S.shape
    nodes = S >= tau_s
    comp, n_comp = ndimage.label(nodes, structure=_FOUR)

    seed_pts: list[tuple[int, int]] = []
    masses: list[float] = []
    is_fb: list[bool] = []
    if nodes.any() and centroids is not None and centroids.count:
        # prefer interior pixels: a seed on a strong boundary pixel is nearly cut off from its region
        target = nodes & (B < 0.5) if (nodes & (B < 0.5)).any() else nodes
        _, near = ndimage.distance_transform_edt(~target, return_indices=True)
        taken = set()
        for x, y, m in centroids.points:
            yy = int(np.clip(round(y), 0, H - 1))
            xx = int(np.clip(round(x), 0, W - 1))
            p = _snap(yy, xx, target, near)
            if p in taken:
                continue
            taken.add(p)
            seed_pts.append(p)
            masses.append(float(m))
            is_fb.append(False)

    seeded = {comp[p] for p in seed_pts}
    for c in range(1, n_comp + 1):
        if c in seeded:
            continue
        member = comp == c
        if fallback and member.sum() >= min_area:
            score = np.where(member, acc if acc is not None else S, -np.inf)
            flat = int(np.argmax(score))
            p = (flat // W, flat % W)
            seed_pts.append(p)
            masses.append(float(acc[p]) if acc is not None else 0.0)
            is_fb.append(True)
        elif fallback:
            nodes &= ~member

    index = np.full((H, W), -1, dtype=np.int64)
    index[nodes] = np.arange(int(nodes.sum()))
    Bc = np.clip(B, 0.0, 1.0)
    e_list, w_list = [], []
    for ea, eb in (((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
                   ((slice(None, -1), slice(None)), (slice(1, None), slice(None)))):
        both = nodes[ea] & nodes[eb]
        i, j = index[ea][both], index[eb][both]
        e_list.append(np.stack([i, j], 1))
        w_list.append(np.exp(-beta * np.maximum(Bc[ea][both], Bc[eb][both])))
    edges = np.concatenate(e_list) if e_list else np.zeros((0, 2), dtype=np.int64)
    weights = np.concatenate(w_list) if w_list else np.zeros(0)

    rim = nodes & ~ndimage.binary_erosion(nodes, structure=_FOUR, border_value=1)
    bg = np.where(rim, rim_weight * np.exp(-beta * Bc), 0.0)[nodes]

    seeds = np.zeros(int(nodes.sum()), dtype=np.int64)
    for k, p in enumerate(seed_pts, start=1):
        seeds[index[p]] = k
    return PixelGraph((H, W), nodes, index, edges, weights, bg, seeds, seed_pts, np.array(masses),
                      np.array(is_fb, dtype=bool))


@dataclass
class WalkResult:
    labels: np.ndarray  # [H,W] int
    probabilities: np.ndarray  # [K+1, H, W]; channel 0 is background
    residuals: np.ndarray  # [K+1] final relative residual per label


def laplacian_system(graph: PixelGraph):
    """(L_U, RHS [n_u, K+1], unseeded ids) for the unseeded nodes."""
    n, K = graph.n_nodes, graph.n_labels
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    Wm = sparse.coo_matrix((np.r_[graph.weights, graph.weights], (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
    deg = np.asarray(Wm.sum(axis=1)).ravel() + graph.bg_weights
    free = np.flatnonzero(graph.seeds == 0)
    fixed = np.flatnonzero(graph.seeds > 0)
    L_U = (sparse.diags(deg[free]) - Wm[free][:, free]).tocsr()
    M = np.zeros((len(fixed), K + 1))
    M[np.arange(len(fixed)), graph.seeds[fixed]] = 1.0
    rhs = np.asarray(Wm[free][:, fixed] @ M)
    rhs[:, 0] += graph.bg_weights[free]
    return L_U, rhs, free


def _check_solvable(graph: PixelGraph, L_U, rhs, free) -> None:
    """Every unseeded component must touch a seed or the background link."""
    if not len(free):
        return
    n_c, lab = sparse.csgraph.connected_components(L_U, directed=False)
    anchored = np.zeros(n_c, dtype=bool)
    np.logical_or.at(anchored, lab, rhs.sum(axis=1) > 0)
    if anchored.all():
        return
    bad = free[np.flatnonzero(~anchored[lab])[0]]
    y, x = np.argwhere(graph.index == bad)[0]
    raise SingularGraphError(f"random walker: pixel (y={y}, x={x}) lies in a component with no seed")


def solve_dirichlet(L_U, rhs: np.ndarray, tol: float = CG_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Jacobi-preconditioned CG per right-hand side; returns (X, relative residuals)."""
    d = L_U.diagonal()
    pre = LinearOperator(L_U.shape, matvec=lambda v: v / d, dtype=np.float64)
    X = np.zeros(rhs.shape)
    res = np.zeros(rhs.shape[1])
    for k in range(rhs.shape[1]):
        b = rhs[:, k]
        nb = np.linalg.norm(b)
        if nb == 0:
            continue
        x, info = cg(L_U, b, rtol=tol * 1e-2, atol=0.0, maxiter=20 * L_U.shape[0] + 100, M=pre)
        r = np.linalg.norm(b - L_U @ x) / nb
        if r >= tol:
            raise RuntimeError(f"conjugate gradient stalled for label {k}: relative residual {r:.3g}")
        X[:, k] = x
        res[k] = r
    return X, res


def random_walk_segment(graph: PixelGraph, tol: float = CG_TOL) -> WalkResult:
    H, W = graph.shape
    K = graph.n_labels
    probs = np.zeros((K + 1, H, W))
    labels = np.zeros((H, W), dtype=np.int64)
    if graph.n_nodes == 0:
        return WalkResult(labels, probs, np.zeros(K + 1))
    L_U, rhs, free = laplacian_system(graph)
    _check_solvable(graph, L_U, rhs, free)
    X, res = solve_dirichlet(L_U, rhs, tol) if len(free) else (np.zeros((0, K + 1)), np.zeros(K + 1))
    P = np.zeros((graph.n_nodes, K + 1))
    P[free] = X
    fixed = graph.seeds > 0
    P[np.flatnonzero(fixed), graph.seeds[fixed]] = 1.0
    probs[:, graph.nodes] = P.T
    labels[graph.nodes] = np.argmax(P, axis=1)  # first maximum = lowest label
    return WalkResult(labels, probs, res)


def relabel_dense(labels: np.ndarray) -> np.ndarray:
    out = np.zeros_like(labels)
    for new, k in enumerate([k for k in np.unique(labels) if k != 0], start=1):
        out[labels == k] = new
    return out


def detections_from_labels(labels: np.ndarray, S: np.ndarray, masses) -> list[Detection]:
    """score_k = mean S over instance k times mass_k / max mass, floored to stay > 0.

    ``masses[k-1]`` belongs to label k. Empty labels are dropped; the list is
    sorted by score (descending, ties by label).
    """
    S = np.asarray(S, dtype=np.float64)
    masses = np.asarray(masses, dtype=np.float64)
    top = masses.max() if masses.size and masses.max() > 0 else 1.0
    dets = []
    for k in range(1, len(masses) + 1):
        m = labels == k
        if not m.any():
            continue
        s = float(np.clip(S[m].mean(), 0.0, 1.0)) * max(masses[k - 1], 0.0) / top
        dets.append((-min(max(s, SCORE_FLOOR), 1.0), k, m))
    dets.sort(key=lambda d: d[:2])
    return [Detection(m, -s) for s, _, m in dets]


@dataclass
class InferenceResult:
    labels: np.ndarray  # dense 0..K' label map, ordered like ``detections``
    detections: list[Detection]
    centroids: cf.CentroidSet
    t_hat: int
    walk: WalkResult | None


def infer_from_maps(S, B, V, tau_s: float = cf.TAU_S, beta: float = BETA, sigma_vote: float = cf.SIGMA_VOTE,
                    nms_radius: int = cf.NMS_RADIUS, rim_weight: float = RIM_WEIGHT,
                    min_area: int = MIN_AREA) -> InferenceResult:
    """Maps -> votes -> centroids -> random walker -> scored instance masks."""
    S = np.asarray(S, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if V.shape != (2,) + S.shape:
        raise ValueError(f"infer: offset field {V.shape} does not match saliency {S.shape}")
    sal = S >= tau_s
    H, W = S.shape
    if not sal.any():
        return InferenceResult(np.zeros((H, W), dtype=np.int64), [], cf.CentroidSet(), 0, None)
    t_hat = int(ndimage.label(sal, structure=_FOUR)[1])
    acc = cf.splat_votes(V, sal.astype(np.float64), 0.5).data[0, 0]
    cents = cf.extract_centroids(acc, sigma_vote, nms_radius, cf.default_tau_mass(sal.sum(), t_hat))
    smoothed = cf.smooth_votes(acc, sigma_vote)
    graph = build_graph(S, B, cents, tau_s, beta, acc=smoothed, rim_weight=rim_weight, min_area=min_area)
    walk = random_walk_segment(graph)
    dets = detections_from_labels(walk.labels, S, graph.seed_mass)
    labels = np.zeros((H, W), dtype=np.int64)
    for k, d in enumerate(dets, start=1):
        labels[d.mask] = k
    return InferenceResult(labels, dets, cents, t_hat, walk)


def infer(image: np.ndarray, model, edges: np.ndarray | None = None, **kw) -> InferenceResult:
    out = model.predict(image, edges)
    return infer_from_maps(out.S, out.B, out.V, **kw)
