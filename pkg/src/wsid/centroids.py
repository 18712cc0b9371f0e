"""Vote accumulation from offset fields, hard centroid extraction and soft counting.

Offsets are in normalized units: a pixel at (x, y) with offset (vx, vy)
votes for (x + vx * W/2, y + vy * H/2). Channel 0 of an offset field is the
x (column) component, channel 1 the y (row) component.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _make, conv2d, monitoring_kinks, mul, note_kink, sigmoid, sum_

TAU_S = 0.5
SIGMA_VOTE = 2.0
NMS_RADIUS = 5


@dataclass
class CentroidSet:
    points: list[tuple[float, float, float]] = field(default_factory=list)  # (x, y, mass)

    @property
    def count(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)


def default_tau_mass(salient_area: float, t_hat: int) -> float:
    """A quarter of the mean instance area |S| / max(t_hat, 1)."""
    return 0.25 * float(salient_area) / max(int(t_hat), 1)


def _salient(S, tau_s: float) -> np.ndarray:
    s = S.data if isinstance(S, Tensor) else np.asarray(S)
    return s >= tau_s


def _vote_geometry(V: np.ndarray):
    """Bilinear corner indices and weights for every pixel's vote target."""
    N, _, H, W = V.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    tx_raw = xs[None] + V[:, 0] * (W / 2.0)
    ty_raw = ys[None] + V[:, 1] * (H / 2.0)
    tx = np.clip(tx_raw, 0.0, W - 1.0)
    ty = np.clip(ty_raw, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(tx), max(W - 2, 0)).astype(int)
    y0 = np.minimum(np.floor(ty), max(H - 2, 0)).astype(int)
    fx, fy = tx - x0, ty - y0
    free_x = (tx_raw > 0.0) & (tx_raw < W - 1.0)
    free_y = (ty_raw > 0.0) & (ty_raw < H - 1.0)
    return x0, y0, fx, fy, free_x, free_y


def splat_votes(V, S, tau_s: float = TAU_S) -> Tensor:
    """Bilinear splat of unit votes from salient pixels -> accumulator [N,1,H,W].

    ``V`` is a Tensor or array [N,2,H,W] (or [2,H,W]); ``S`` a saliency
    map/mask [N,H,W], [N,1,H,W] or [H,W]. Gradients flow to ``V`` only.
    Out-of-frame targets are clamped to the border.
    """
    Vt = V if isinstance(V, Tensor) else Tensor(V)
    squeeze = Vt.ndim == 3
    Vd = Vt.data[None] if squeeze else Vt.data
    N, C, H, W = Vd.shape
    if C != 2:
        raise ValueError(f"splat_votes: offset field needs 2 channels, got {C}")
    mask = _salient(S, tau_s).reshape(N, H, W)
    x0, y0, fx, fy, free_x, free_y = _vote_geometry(Vd)
    if monitoring_kinks() and mask.any():
        # bilinear weights switch cells at integer targets; clamping switches at the frame edge
        for t, n in ((Vd[:, 0] * (W / 2.0) + np.arange(W), W), (Vd[:, 1] * (H / 2.0) + np.arange(H)[:, None], H)):
            tm = t[mask]
            note_kink(np.minimum(np.abs(tm - np.round(tm)), np.minimum(np.abs(tm), np.abs(tm - (n - 1)))),
                      np.stack([np.floor(np.clip(tm, 0, n - 1)), (tm > 0) & (tm < n - 1)]))
    acc = np.zeros((N, H, W))
    for n in range(N):
        m = mask[n]
        if not m.any():
            continue
        a, b, px, py = x0[n][m], y0[n][m], fx[n][m], fy[n][m]
        np.add.at(acc[n], (b, a), (1 - px) * (1 - py))
        np.add.at(acc[n], (b, a + 1 if W > 1 else a), px * (1 - py))
        np.add.at(acc[n], (b + 1 if H > 1 else b, a), (1 - px) * py)
        np.add.at(acc[n], (b + 1 if H > 1 else b, a + 1 if W > 1 else a), px * py)
    out = acc[:, None]

    def bw(g):
        g = g[:, 0]
        gv = np.zeros_like(Vd)
        for n in range(N):
            m = mask[n]
            if not m.any():
                continue
            a, b, px, py = x0[n][m], y0[n][m], fx[n][m], fy[n][m]
            gn = g[n]
            g00, g01 = gn[b, a], gn[b, np.minimum(a + 1, W - 1)]
            g10, g11 = gn[np.minimum(b + 1, H - 1), a], gn[np.minimum(b + 1, H - 1), np.minimum(a + 1, W - 1)]
            dtx = (1 - py) * (g01 - g00) + py * (g11 - g10)
            dty = (1 - px) * (g10 - g00) + px * (g11 - g01)
            gv[n, 0][m] = dtx * free_x[n][m] * (W / 2.0)
            gv[n, 1][m] = dty * free_y[n][m] * (H / 2.0)
        return ((Vt, gv[0] if squeeze else gv),)

    return _make(out, (Vt,), "splat", bw)


def vote_kernel(sigma: float) -> np.ndarray:
    """Peak-normalized Gaussian, so a tight cluster keeps roughly its vote mass."""
    r = int(np.ceil(3 * sigma))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return np.exp(-(x ** 2 + y ** 2) / (2.0 * sigma ** 2))


def smooth_votes(acc, sigma: float = SIGMA_VOTE):
    """Gaussian-smoothed accumulator; works on Tensors [N,1,H,W] or arrays [H,W]."""
    k = vote_kernel(sigma)
    r = k.shape[0] // 2
    if isinstance(acc, Tensor):
        return conv2d(acc, Tensor(k[None, None]), None, stride=1, pad=r)
    a = np.asarray(acc, dtype=np.float64)
    return conv2d(Tensor(a[None, None]), Tensor(k[None, None]), None, stride=1, pad=r).data[0, 0]


def local_max_mask(A: np.ndarray, radius: int = NMS_RADIUS) -> np.ndarray:
    """Pixels strictly greater than every earlier (row-major) neighbour and
    >= every later one within a disk of ``radius``."""
    A = np.asarray(A, dtype=np.float64)
    H, W = A.shape
    r = int(radius)
    P = np.pad(A, r, constant_values=-np.inf)
    keep = np.ones((H, W), dtype=bool)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if (dy == 0 and dx == 0) or dy * dy + dx * dx > r * r:
                continue
            Q = P[r + dy:r + dy + H, r + dx:r + dx + W]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (A > Q) if earlier else (A >= Q)
    return keep


def extract_centroids(acc, sigma_vote: float = SIGMA_VOTE, nms_radius: int = NMS_RADIUS,
                      tau_mass: float = 1.0) -> CentroidSet:
    a = acc.data if isinstance(acc, Tensor) else np.asarray(acc, dtype=np.float64)
    a = a.reshape(a.shape[-2:])
    if not a.any():
        return CentroidSet()
    A = smooth_votes(a, sigma_vote)
    peaks = local_max_mask(A, nms_radius) & (A >= tau_mass)
    ys, xs = np.nonzero(peaks)
    masses = A[ys, xs]
    order = np.argsort(-masses, kind="stable")
    return CentroidSet([(float(xs[i]), float(ys[i]), float(masses[i])) for i in order])


def soft_count(acc: Tensor, sigma_vote: float = SIGMA_VOTE, nms_radius: int = NMS_RADIUS,
               tau_mass=1.0, temperature=None, maxima: np.ndarray | None = None) -> Tensor:
    """Differentiable count sum_{local maxima} sigmoid((A - tau) / T) -> [N].

    The local-maximum mask is computed from the forward values and held
    constant during backprop (or supplied via ``maxima``).
    """
    if not isinstance(acc, Tensor):
        acc = Tensor(acc)
    if acc.ndim == 2:
        acc = acc.reshape(1, 1, *acc.shape)
    N = acc.shape[0]
    tau = np.broadcast_to(np.asarray(tau_mass, dtype=np.float64), (N,))
    T = tau / 5.0 if temperature is None else np.broadcast_to(np.asarray(temperature, dtype=np.float64), (N,))
    A = smooth_votes(acc, sigma_vote)
    if maxima is None:
        maxima = np.stack([local_max_mask(A.data[n, 0], nms_radius) for n in range(N)])[:, None]
    maxima = np.asarray(maxima, dtype=np.float64).reshape(A.shape)
    z = (A - Tensor(tau[:, None, None, None])) * Tensor(1.0 / T[:, None, None, None])
    return sum_(mul(sigmoid(z), Tensor(maxima)), axis=(1, 2, 3))
