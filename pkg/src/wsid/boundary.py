"""Boundary enhancement: directional convs, residual refinement and Canny edges."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, add, concat_channels, conv2d, relu

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
CANNY_SIGMA = 1.0
CANNY_LOW = 0.1
CANNY_HIGH = 0.2


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """[3,H,W] or [H,W,3] RGB -> [H,W] luma."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 3:
        return np.tensordot(GRAY_WEIGHTS, image, axes=(0, 0))
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ GRAY_WEIGHTS
    raise ShapeError(f"rgb_to_gray: expected 3-channel image, got {image.shape}")


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    radius = int(np.ceil(3 * sigma)) if radius is None else radius
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _correlate1d(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    p = np.pad(img, pad, mode="symmetric")
    out = np.zeros_like(img)
    n = img.shape[axis]
    for i, kv in enumerate(k):
        out += kv * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(sigma)
    return _correlate1d(_correlate1d(img, k, 0), k, 1)


def sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(img, 1, mode="symmetric")
    H, W = img.shape
    s = lambda dy, dx: p[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]  # noqa: E731
    gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2 * s(0, -1) + s(1, -1))
    gy = (s(1, -1) + 2 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1))
    return gx, gy


# neighbour offsets (dy, dx) along the quantized gradient direction
_DIRS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


def non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Thin ridges along 4 quantized gradient directions.

    A pixel survives if it is >= its backward neighbour and strictly > its
    forward neighbour (up to a relative tolerance), so plateaus of width two
    keep exactly one pixel.
    """
    H, W = mag.shape
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    q = np.zeros((H, W), dtype=int)
    q[(ang >= 22.5) & (ang < 67.5)] = 1
    q[(ang >= 67.5) & (ang < 112.5)] = 2
    q[(ang >= 112.5) & (ang < 157.5)] = 3
    tol = 1e-9 * float(mag.max())
    p = np.pad(mag, 1)
    keep = np.zeros((H, W), dtype=bool)
    for d, (dy, dx) in _DIRS.items():
        fwd = p[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
        bwd = p[1 - dy:1 - dy + H, 1 - dx:1 - dx + W]
        ok = (mag >= bwd - tol) & (mag > fwd + tol)
        keep |= (q == d) & ok
    return np.where(keep, mag, 0.0)


def hysteresis(strong: np.ndarray, weak: np.ndarray) -> np.ndarray:
    """Flood-fill from strong pixels through weak ones (8-connectivity)."""
    H, W = strong.shape
    out = strong.copy()
    queue = deque(zip(*np.nonzero(strong)))
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < H and 0 <= xx < W and weak[yy, xx] and not out[yy, xx]:
                    out[yy, xx] = True
                    queue.append((yy, xx))
    return out


def canny(image: np.ndarray, sigma: float = CANNY_SIGMA, low: float = CANNY_LOW,
          high: float = CANNY_HIGH) -> np.ndarray:
    """Binary Canny edge map of a grayscale plane.

    ``low`` and ``high`` are fractions of the maximum gradient magnitude.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"canny: expected a non-empty 2-D plane, got shape {img.shape}")
    if not (0 < low < high <= 1):
        raise ValueError(f"canny: need 0 < low < high <= 1, got low={low} high={high}")
    if sigma <= 0:
        raise ValueError(f"canny: sigma must be > 0, got {sigma}")
    gx, gy = sobel(gaussian_blur(img, sigma))
    mag = np.hypot(gx, gy)
    peak = float(mag.max())
    if peak <= 0:
        return np.zeros_like(img)
    thin = non_max_suppression(mag, gx, gy)
    strong = thin >= high * peak
    weak = thin >= low * peak
    return hysteresis(strong, weak).astype(np.float64)


def canny_rgb(image: np.ndarray, **kw) -> np.ndarray:
    return canny(rgb_to_gray(image), **kw)


# -- learned part ---------------------------------------------------------------------
def _conv_init(rng, k, c, kh, kw, gain=1.0):
    return Tensor(rng.normal(0, gain * np.sqrt(2.0 / (c * kh * kw)), (k, c, kh, kw)), True)


@dataclass
class ResBlock:
    w_a: Tensor
    b_a: Tensor
    w_b: Tensor
    b_b: Tensor

    def __post_init__(self):
        c = self.w_a.shape[1]
        if self.w_a.shape[0] != c or self.w_b.shape[:2] != (c, c):
            raise ShapeError("ResBlock: convs must preserve channel count for the identity skip")

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(conv2d(x, self.w_a, self.b_a, pad=1))
        return add(x, conv2d(h, self.w_b, self.b_b, pad=1))


@dataclass
class BeWeights:
    w_1x7: Tensor
    b_1x7: Tensor
    w_7x1: Tensor
    b_7x1: Tensor
    blocks: list[ResBlock] = field(default_factory=list)
    w_fuse: Tensor | None = None
    b_fuse: Tensor | None = None

    @property
    def out_channels(self) -> int:
        return self.w_fuse.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, width: int = 8, out: int = 8, zero: bool = False) -> "BeWeights":
        def conv(k, c, kh, kw, gain=1.0):
            if zero:
                return Tensor(np.zeros((k, c, kh, kw)), True)
            return _conv_init(rng, k, c, kh, kw, gain)

        def bias(k):
            return Tensor(np.zeros(k), True)

        blocks = [ResBlock(conv(width, width, 3, 3), bias(width), conv(width, width, 3, 3, 0.3), bias(width))
                  for _ in range(3)]
        return cls(conv(width, 3, 1, 7), bias(width), conv(width, width, 7, 1), bias(width), blocks,
                   conv(out, width + 1, 1, 1), bias(out))

    def params(self) -> dict[str, Tensor]:
        p = {"w_1x7": self.w_1x7, "b_1x7": self.b_1x7, "w_7x1": self.w_7x1, "b_7x1": self.b_7x1,
             "w_fuse": self.w_fuse, "b_fuse": self.b_fuse}
        for i, blk in enumerate(self.blocks):
            p.update({f"res{i}.w_a": blk.w_a, f"res{i}.b_a": blk.b_a, f"res{i}.w_b": blk.w_b, f"res{i}.b_b": blk.b_b})
        return p


def canny_planes(images: np.ndarray) -> np.ndarray:
    """Canny edges for a batch [N,3,H,W] -> [N,1,H,W] constant plane."""
    return np.stack([canny_rgb(img)[None] for img in images])


def be_forward(image: Tensor, w: BeWeights, edges: np.ndarray | None = None) -> Tensor:
    """Enhanced edge features f_b at input resolution.

    ``edges`` ([N,1,H,W]) may be precomputed; otherwise Canny runs on
    ``image``. The edge plane is a constant input, no gradient reaches it.
    """
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"be_forward expects [N,3,H,W], got {image.shape}")
    if edges is None:
        edges = canny_planes(image.data)
    if edges.shape != (image.shape[0], 1) + image.shape[2:]:
        raise ShapeError(f"be_forward: edge plane {edges.shape} does not match image {image.shape}")
    x = relu(conv2d(image, w.w_1x7, w.b_1x7, pad=(0, 3)))
    x = relu(conv2d(x, w.w_7x1, w.b_7x1, pad=(3, 0)))
    for blk in w.blocks:
        x = blk(x)
    x = concat_channels([x, Tensor(edges)])
    return conv2d(x, w.w_fuse, w.b_fuse)
