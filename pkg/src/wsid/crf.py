"""Fully connected two-label CRF with mean-field inference.

Pairwise potentials are Potts-weighted sums of an appearance kernel
``w1 * exp(-|pi - pj|^2 / 2 sa^2 - |Ii - Ij|^2 / 2 sb^2)`` and a smoothness
kernel ``w2 * exp(-|pi - pj|^2 / 2 sg^2)``. Each kernel is symmetrically
normalized, ``D^-1/2 K D^-1/2`` with ``D`` its row sums, so messages stay on
the scale of the unaries regardless of image size. Messages are computed
exactly over all pixel pairs (row blocks keep memory bounded); above
``exact_max`` pixels the kernel is cut to a square window of half-width
``3 * max(sa, sg)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SALIENT, BACKGROUND = 0, 1


@dataclass(frozen=True)
class CrfParams:
    w1: float = 4.0
    w2: float = 3.0
    sigma_alpha: float = 49.0
    sigma_beta: float = 5.0
    sigma_gamma: float = 3.0
    iterations: int = 5

    def __post_init__(self):
        if min(self.w1, self.w2) < 0:
            raise ValueError("CRF kernel weights must be >= 0")
        if min(self.sigma_alpha, self.sigma_beta, self.sigma_gamma) <= 0:
            raise ValueError("CRF bandwidths must be > 0")
        if self.iterations < 1:
            raise ValueError("CRF needs at least one mean-field iteration")

    @property
    def radius(self) -> float:
        return 3.0 * max(self.sigma_alpha, self.sigma_gamma)


def unary_from_prob(prob: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """[H,W] salient probability -> [2,H,W] negative log-probabilities."""
    p = np.clip(np.asarray(prob, dtype=np.float64), eps, 1.0 - eps)
    return np.stack([-np.log(p), -np.log1p(-p)])


def softmax_neg(unary: np.ndarray) -> np.ndarray:
    z = -unary
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _as_hwc(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    elif img.ndim == 3 and img.shape[0] in (1, 3) and img.shape[-1] not in (1, 3):
        img = np.moveaxis(img, 0, -1)
    return img


def _gauss_gram(feat: np.ndarray, rows: slice) -> np.ndarray:
    """exp(-|f_i - f_j|^2) for i in ``rows`` and all j."""
    sq = (feat * feat).sum(axis=1)
    d2 = feat[rows] @ feat.T
    d2 *= -2.0
    d2 += sq[rows, None]
    d2 += sq[None, :]
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-d2, out=d2)


def _inv_sqrt(d: np.ndarray) -> np.ndarray:
    return np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)


def _cheb(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a[:, None, :] - b[None, :, :]).max(-1)


def _appearance(img: np.ndarray, params: CrfParams, truncate: bool, block: int = 2048) -> np.ndarray:
    H, W, C = img.shape
    N = H * W
    ys, xs = np.divmod(np.arange(N), W)
    pos = np.stack([ys, xs], axis=1).astype(np.float64)
    feat = np.hstack([pos / (np.sqrt(2.0) * params.sigma_alpha),
                      img.reshape(N, C) / (np.sqrt(2.0) * params.sigma_beta)])
    K = np.empty((N, N))
    for s in range(0, N, block):
        rows = slice(s, min(s + block, N))
        K[rows] = _gauss_gram(feat, rows)
        if truncate:
            K[rows][_cheb(pos[rows], pos) > params.radius] = 0.0
    np.fill_diagonal(K, 0.0)
    return K


def _axis_kernel(n: int, sigma: float, radius: float | None) -> np.ndarray:
    d = np.subtract.outer(np.arange(n), np.arange(n)).astype(np.float64)
    g = np.exp(-d * d / (2.0 * sigma ** 2))
    if radius is not None:
        g[np.abs(d) > radius] = 0.0
    return g


class MessagePassing:
    """Normalized Potts messages for one image.

    The appearance kernel is held as a dense matrix. The smoothness kernel
    is a pure spatial Gaussian and is applied separably along rows and
    columns, which is exact for the all-pairs sum.
    """

    def __init__(self, image: np.ndarray, params: CrfParams, truncate: bool = False, normalize: bool = True):
        img = _as_hwc(image)
        self.H, self.W = img.shape[:2]
        self.params = params
        self.Ka = _appearance(img, params, truncate) if params.w1 else None
        if self.Ka is not None:
            self.inv_a = _inv_sqrt(self.Ka.sum(axis=1)) if normalize else np.ones(self.H * self.W)
        if params.w2:
            r = params.radius if truncate else None
            self.gy = _axis_kernel(self.H, params.sigma_gamma, r)
            self.gx = _axis_kernel(self.W, params.sigma_gamma, r)
            d = np.outer(self.gy.sum(1), self.gx.sum(1)).ravel() - 1.0
            self.inv_g = _inv_sqrt(d) if normalize else np.ones(self.H * self.W)

    def __call__(self, Q: np.ndarray) -> np.ndarray:
        """[L,N] marginals -> [L,N] weighted kernel sums sum_{j != i} k_ij Q_j."""
        out = np.zeros_like(Q)
        if self.Ka is not None:
            out += self.params.w1 * self.inv_a * (self.Ka @ (Q * self.inv_a).T).T
        if self.params.w2:
            q = (Q * self.inv_g).reshape(-1, self.H, self.W)
            sm = ((self.gy @ q) @ self.gx.T).reshape(Q.shape) - q.reshape(Q.shape)
            out += self.params.w2 * self.inv_g * sm
        return out


def pairwise_kernel(image: np.ndarray, params: CrfParams, truncate: bool = False,
                    normalize: bool = True) -> np.ndarray:
    """Dense N x N weighted kernel matrix with zero diagonal (reference form)."""
    img = _as_hwc(image)
    H, W = img.shape[:2]
    N = H * W
    ys, xs = np.divmod(np.arange(N), W)
    pos = np.stack([ys, xs], axis=1).astype(np.float64)
    out = np.zeros((N, N))
    kernels = []
    if params.w1:
        kernels.append((params.w1, _appearance(img, params, truncate)))
    if params.w2:
        Kg = _gauss_gram(pos / (np.sqrt(2.0) * params.sigma_gamma), slice(None))
        if truncate:
            Kg[_cheb(pos, pos) > params.radius] = 0.0
        np.fill_diagonal(Kg, 0.0)
        kernels.append((params.w2, Kg))
    for w, K in kernels:
        if normalize:
            inv = _inv_sqrt(K.sum(axis=1))
            K *= inv[:, None]
            K *= inv[None, :]
        out += w * K
    return out


def mean_field(image: np.ndarray, unary: np.ndarray, params: CrfParams = CrfParams(),
               mode: str = "auto", exact_max: int = 96 * 96, return_all: bool = False) -> np.ndarray:
    """Salient-label marginal [H,W] after ``params.iterations`` updates.

    ``image`` is RGB in [0,255] ([H,W,3] or [3,H,W]); ``unary`` is [2,H,W]
    with label 0 = salient, 1 = background. ``mode`` is ``exact``,
    ``truncated`` or ``auto`` (exact up to ``exact_max`` pixels).
    """
    img = _as_hwc(image)
    U = np.asarray(unary, dtype=np.float64)
    if U.ndim != 3 or U.shape[0] != 2:
        raise ValueError(f"mean_field: unary must be [2,H,W], got {U.shape}")
    if U.shape[1:] != img.shape[:2]:
        raise ValueError(f"mean_field: unary spatial size {U.shape[1:]} does not match image {img.shape[:2]}")
    if not np.all(np.isfinite(U)):
        raise ValueError("mean_field: unary has non-finite entries")
    H, W = img.shape[:2]
    N = H * W
    Q = softmax_neg(U).reshape(2, N)
    if params.w1 == 0 and params.w2 == 0:
        out = Q.reshape(2, H, W)
        return out if return_all else out[SALIENT]
    if mode == "auto":
        mode = "exact" if N <= exact_max else "truncated"
    if mode not in ("exact", "truncated"):
        raise ValueError(f"mean_field: unknown mode {mode!r}")
    messages = MessagePassing(img, params, truncate=(mode == "truncated"))
    Uf = U.reshape(2, N)
    for _ in range(params.iterations):
        # Potts: label l pays for the kernel mass on every other label
        energy = Uf + messages(Q)[::-1]
        Q = softmax_neg(energy)
    out = Q.reshape(2, H, W)
    return out if return_all else out[SALIENT]


def cam_to_pseudo_mask(cam: np.ndarray, image: np.ndarray, params: CrfParams = CrfParams(),
                       eps: float = 1e-6) -> np.ndarray:
    """Max-normalize a class-response map, refine with the CRF, binarize at 0.5."""
    cam = np.asarray(cam, dtype=np.float64)
    peak = float(cam.max()) if cam.size else 0.0
    if peak <= 0:
        return np.zeros(cam.shape, dtype=bool)
    q = mean_field(image, unary_from_prob(cam / peak, eps), params)
    return q > 0.5
