"""Three-branch network at toy scale: encoder, heads, losses and SGD training.

Each branch owns its encoder. The centroid and boundary branches refine
their pyramids with the same per-scale ``DaWeights`` objects, so those are
the only parameters shared between branches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import centroids as cf
from .attention import DaWeights, da_forward
from .boundary import BeWeights, be_forward
from .tensor import (ShapeError, Tensor, abs_, add, bilinear_resize, clamp, concat_channels, conv2d, log,
                     mean, mul, relu, scale, sigmoid, slice_channels, sum_)

logger = logging.getLogger(__name__)

ENC_CHANNELS = (16, 32, 64, 64, 64)
ENC_STRIDES = (2, 2, 2, 2, 1)
BRANCHES = ("saliency", "boundary", "centroid")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Conv:
    w: Tensor
    b: Tensor
    stride: int = 1
    pad: int | tuple = 0

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, c: int, kh: int, kw: int | None = None,
             stride: int = 1, pad=None, gain: float = 1.0) -> "Conv":
        kw = kh if kw is None else kw
        pad = (kh // 2, kw // 2) if pad is None else pad
        std = gain * math.sqrt(2.0 / (c * kh * kw))
        return cls(Tensor(rng.normal(0.0, std, (k, c, kh, kw)), True), Tensor(np.zeros(k), True), stride, pad)

    @property
    def in_channels(self) -> int:
        return self.w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride, self.pad)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


# -- encoder ---------------------------------------------------------------------------
class Encoder:
    """Five conv stages at strides 2, 4, 8, 16, 16."""

    def __init__(self, rng: np.random.Generator, in_channels: int = 3, channels: Sequence[int] = ENC_CHANNELS):
        self.channels = tuple(channels)
        self.stages = []
        c = in_channels
        for k, s in zip(self.channels, ENC_STRIDES):
            self.stages.append(Conv.init(rng, k, c, 3, stride=s, pad=1))
            c = k

    def __call__(self, image: Tensor) -> list[Tensor]:
        feats, x = [], image
        for st in self.stages:
            x = relu(st(x))
            feats.append(x)
        return feats

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, st in enumerate(self.stages):
            out.update(st.params(f"{prefix}.enc{i}"))
        return out


def backbone_forward(image: Tensor, encoder: Encoder) -> list[Tensor]:
    if image.ndim != 4 or image.shape[1] != encoder.stages[0].in_channels:
        raise ShapeError(f"backbone expects [N,{encoder.stages[0].in_channels},H,W], got {image.shape}")
    return encoder(image)


def refine(pyr: Sequence[Tensor], da: Sequence[DaWeights] | None) -> list[Tensor]:
    if da is None:
        return list(pyr)
    if len(da) != len(pyr):
        raise ShapeError(f"{len(da)} DA weight sets for {len(pyr)} pyramid levels")
    return [da_forward(f, w) for f, w in zip(pyr, da)]


def _resize_to(x: Tensor, ref: Tensor | tuple) -> Tensor:
    h, w = ref.shape[-2:] if isinstance(ref, Tensor) else ref
    return bilinear_resize(x, h, w)


def _check_pyramid(pyr: Sequence[Tensor], channels: Sequence[int], who: str) -> None:
    got = tuple(f.shape[1] for f in pyr)
    if got != tuple(channels):
        raise ShapeError(f"{who}: pyramid channels {got} do not match head built for {tuple(channels)}")


# -- heads -------------------------------------------------------------------------------
class CentroidHead:
    """f_h = Conv(Concat(f3', f4', f5')); V = sigma(Conv(Conv(Concat(f_h, f1', f2'))))."""

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = ENC_CHANNELS,
                 fh_width: int = 16, mid: int = 16):
        self.channels = tuple(channels)
        c1, c2, c3, c4, c5 = self.channels
        self.fh = Conv.init(rng, fh_width, c3 + c4 + c5, 3)
        self.conv_a = Conv.init(rng, mid, fh_width + c1 + c2, 3)
        self.conv_b = Conv.init(rng, 2, mid, 3, gain=0.1)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.fh.params(f"{prefix}.fh"), **self.conv_a.params(f"{prefix}.conv_a"),
                **self.conv_b.params(f"{prefix}.conv_b")}


def centroid_branch_forward(pyr: Sequence[Tensor], da: Sequence[DaWeights] | None, head: CentroidHead,
                            out_size: tuple[int, int]) -> Tensor:
    """Offset field V in (-1, 1), [N,2,H,W]; v = 2 * sigmoid(.) - 1."""
    _check_pyramid(pyr, head.channels, "centroid branch")
    f1, f2, f3, f4, f5 = refine(pyr, da)
    high = concat_channels([f3, _resize_to(f4, f3), _resize_to(f5, f3)])
    fh = relu(head.fh(high))
    low = concat_channels([_resize_to(fh, f1), f1, _resize_to(f2, f1)])
    logits = head.conv_b(relu(head.conv_a(low)))
    y = sigmoid(bilinear_resize(logits, *out_size))
    return add(scale(y, 2.0), Tensor(-1.0))


class BoundaryHead:
    """B = sigma(Conv1x1(Concat(f1', ..., f5', f_b)))."""

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = ENC_CHANNELS, be_channels: int = 8):
        self.channels = tuple(channels)
        self.be_channels = be_channels
        self.conv = Conv.init(rng, 1, sum(self.channels) + be_channels, 1, gain=0.5)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.conv.params(f"{prefix}.out")


def boundary_branch_forward(pyr: Sequence[Tensor], da: Sequence[DaWeights] | None, f_b: Tensor | None,
                            head: BoundaryHead, out_size: tuple[int, int]) -> Tensor:
    """B = sigma(Conv1x1(Concat(up(f1'), ..., up(f5'), f_b))).

    A 1x1 conv and bilinear resizing commute, so each level is projected
    with its slice of the weight before upsampling; the result equals the
    concat form without building the full-resolution stack.
    """
    _check_pyramid(pyr, head.channels, "boundary branch")
    got_b = 0 if f_b is None else f_b.shape[1]
    if got_b != head.be_channels:
        raise ShapeError(f"boundary branch: head expects {head.be_channels} edge-feature channels, got {got_b}")
    parts = list(refine(pyr, da)) + ([] if f_b is None else [f_b])
    logit, start = None, 0
    for f in parts:
        c = f.shape[1]
        wk = slice_channels(head.conv.w, start, start + c) if head.conv.in_channels != c else head.conv.w
        y = _resize_to(conv2d(f, wk), out_size)
        logit = y if logit is None else add(logit, y)
        start += c
    return sigmoid(add(logit, head.conv.b.reshape(1, 1, 1, 1)))


class SaliencyHead:
    """Decoder: fuse f4+f5, then three upsample-and-concat levels (f3, f2, f1)."""

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = ENC_CHANNELS,
                 widths: Sequence[int] = (32, 32, 16, 16)):
        self.channels = tuple(channels)
        c1, c2, c3, c4, c5 = self.channels
        w0, w1, w2, w3 = widths
        self.top = Conv.init(rng, w0, c4 + c5, 1)
        self.up3 = Conv.init(rng, w1, w0 + c3, 3)
        self.up2 = Conv.init(rng, w2, w1 + c2, 3)
        self.up1 = Conv.init(rng, w3, w2 + c1, 3)
        self.out = Conv.init(rng, 1, w3, 1, gain=0.5)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name in ("top", "up3", "up2", "up1", "out"):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        return out


def saliency_branch_forward(pyr: Sequence[Tensor], head: SaliencyHead, out_size: tuple[int, int]) -> Tensor:
    _check_pyramid(pyr, head.channels, "saliency branch")
    f1, f2, f3, f4, f5 = pyr
    x = relu(head.top(concat_channels([f4, _resize_to(f5, f4)])))
    x = relu(head.up3(concat_channels([_resize_to(x, f3), f3])))
    x = relu(head.up2(concat_channels([_resize_to(x, f2), f2])))
    x = relu(head.up1(concat_channels([_resize_to(x, f1), f1])))
    return sigmoid(bilinear_resize(head.out(x), *out_size))


# -- full model -------------------------------------------------------------------------
@dataclass
class BranchOutputs:
    V: np.ndarray  # [2,H,W]
    B: np.ndarray  # [H,W]
    S: np.ndarray  # [H,W]


class WsidNet:
    def __init__(self, seed: int = 0, use_da: bool = True, use_be: bool = True, reduction: int = 4,
                 be_width: int = 8):
        rng = np.random.default_rng(seed)
        self.use_da, self.use_be = use_da, use_be
        self.sal_enc = Encoder(rng)
        self.sal_head = SaliencyHead(rng)
        self.bnd_enc = Encoder(rng)
        self.be = BeWeights.init(rng, width=be_width, out=be_width) if use_be else None
        self.bnd_head = BoundaryHead(rng, be_channels=be_width if use_be else 0)
        self.cen_enc = Encoder(rng)
        self.cen_head = CentroidHead(rng)
        self.da = [DaWeights.init(c, rng, reduction) for c in ENC_CHANNELS] if use_da else None

    # parameter groups; DA appears in both the boundary and centroid groups
    def da_params(self) -> dict[str, Tensor]:
        out = {}
        for i, w in enumerate(self.da or []):
            out.update({f"da{i}.{k}": v for k, v in w.params().items()})
        return out

    def branch_params(self, branch: str) -> dict[str, Tensor]:
        if branch == "saliency":
            return {**self.sal_enc.params("saliency"), **self.sal_head.params("saliency.head")}
        if branch == "boundary":
            p = {**self.bnd_enc.params("boundary"), **self.bnd_head.params("boundary.head")}
            if self.be is not None:
                p.update({f"boundary.be.{k}": v for k, v in self.be.params().items()})
            return {**p, **self.da_params()}
        if branch == "centroid":
            return {**self.cen_enc.params("centroid"), **self.cen_head.params("centroid.head"), **self.da_params()}
        raise ValueError(f"unknown branch {branch!r}")

    def params(self) -> dict[str, Tensor]:
        out = {}
        for b in BRANCHES:
            out.update(self.branch_params(b))
        return out

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        own = self.params()
        missing = sorted(set(own) - set(values))
        if missing:
            raise KeyError(f"checkpoint is missing tensors: {', '.join(missing[:5])}")
        for k, t in own.items():
            v = np.asarray(values[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ShapeError(f"checkpoint tensor {k} has shape {v.shape}, expected {t.shape}")
            t.data = v.copy()

    # forwards
    def saliency(self, image: Tensor) -> Tensor:
        return saliency_branch_forward(backbone_forward(image, self.sal_enc), self.sal_head, image.shape[2:])

    def boundary(self, image: Tensor, edges: np.ndarray | None = None) -> Tensor:
        f_b = be_forward(image, self.be, edges) if self.be is not None else None
        return boundary_branch_forward(backbone_forward(image, self.bnd_enc), self.da, f_b, self.bnd_head,
                                       image.shape[2:])

    def centroid(self, image: Tensor) -> Tensor:
        return centroid_branch_forward(backbone_forward(image, self.cen_enc), self.da, self.cen_head,
                                       image.shape[2:])

    def predict(self, image: np.ndarray, edges: np.ndarray | None = None) -> BranchOutputs:
        """Run all branches on one [3,H,W] image in [0,1]."""
        x = Tensor(np.asarray(image, dtype=np.float64)[None])
        e = None if edges is None else np.asarray(edges, dtype=np.float64).reshape(1, 1, *x.shape[2:])
        return BranchOutputs(V=self.centroid(x).data[0], B=self.boundary(x, e).data[0, 0],
                             S=self.saliency(x).data[0, 0])


# -- losses -------------------------------------------------------------------------------
EPS = 1e-7


def _as4(a, like: Tensor) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(like.shape)


def loss_saliency(S: Tensor, pseudo) -> Tensor:
    """Mean binary cross-entropy against a {0,1} pseudo mask."""
    y = _as4(pseudo, S)
    p = clamp(S, EPS, 1.0 - EPS)
    ll = add(mul(log(p), Tensor(y)), mul(log(add(Tensor(1.0), -p)), Tensor(1.0 - y)))
    return -mean(ll)


def loss_boundary(B: Tensor, pseudo) -> Tensor:
    """Class-balanced BCE: half the mean over edge pixels plus half over the rest.

    With no edge (or no non-edge) pixels the present class takes full weight.
    """
    y = _as4(pseudo, B) >= 0.5
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    p = clamp(B, EPS, 1.0 - EPS)
    terms = []
    if n_pos:
        terms.append(scale(sum_(mul(log(p), Tensor(y.astype(float)))), -1.0 / n_pos))
    if n_neg:
        terms.append(scale(sum_(mul(log(add(Tensor(1.0), -p)), Tensor((~y).astype(float)))), -1.0 / n_neg))
    if len(terms) == 2:
        return scale(add(terms[0], terms[1]), 0.5)
    return terms[0]


def loss_centroid(V: Tensor, pseudo_offsets, mask) -> Tensor:
    """Mean over salient pixels of |dx| + |dy| between predicted and pseudo offsets."""
    m = np.asarray(mask, dtype=bool).reshape(V.shape[0], 1, *V.shape[2:])
    n = int(m.sum())
    if n == 0:
        return Tensor(0.0)
    diff = abs_(add(V, Tensor(-_as4(pseudo_offsets, V))))
    return scale(sum_(mul(diff, Tensor(np.broadcast_to(m, V.shape).astype(float)))), 1.0 / n)


def loss_subitizing(V: Tensor, S, t_star, tau_s: float = cf.TAU_S, sigma_vote: float = cf.SIGMA_VOTE,
                    nms_radius: int = cf.NMS_RADIUS, maxima: np.ndarray | None = None) -> Tensor:
    """MSE between the soft centroid count of salient votes and the subitizing label.

    ``S`` only selects voting pixels; it is read as data, so no gradient
    reaches it (or whatever produced it). ``tau_mass`` uses the label as the
    instance-count estimate.
    """
    if V.ndim == 3:
        V = V.reshape(1, *V.shape)
    N, _, H, W = V.shape
    t = np.broadcast_to(np.asarray(t_star, dtype=np.float64), (N,))
    if np.any(t < 0):
        raise ValueError("loss_subitizing: t_star must be >= 0")
    sal = _salient_mask(S, N, H, W, tau_s)
    area = sal.reshape(N, -1).sum(axis=1).astype(float)
    live = area > 0
    const = float(np.sum(t[~live] ** 2))
    if not live.any():
        return Tensor(const / N)
    tau = np.array([cf.default_tau_mass(a, k) for a, k in zip(area, t)])
    acc = cf.splat_votes(V, sal, 0.5)
    c = cf.soft_count(acc, sigma_vote, nms_radius, np.where(live, tau, 1.0), None, maxima)
    err = add(c, Tensor(-t))
    sq = mul(mul(err, err), Tensor(live.astype(float)))
    return scale(add(sum_(sq), Tensor(const)), 1.0 / N)


def _salient_mask(S, N, H, W, tau_s) -> np.ndarray:
    s = S.data if isinstance(S, Tensor) else np.asarray(S, dtype=np.float64)
    return (s >= tau_s).reshape(N, H, W)


# -- training ----------------------------------------------------------------------------
@dataclass
class TrainConfig:
    lr_init: float = 0.01
    batch: int = 6
    epochs: int = 5
    max_itr: int | None = None
    gamma: float = 0.9
    momentum: float = 0.9
    seed: int = 0
    clip_norm: float | None = 10.0

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError("lr_init must be > 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class LossWeights:
    saliency: float = 1.0
    boundary: float = 1.0
    centroid: float = 1.0
    subitizing: float = 1.0


def poly_lr(itr: int, cfg: TrainConfig, max_itr: int | None = None) -> float:
    """lr_init * (1 - itr / max_itr) ** gamma."""
    m = cfg.max_itr if max_itr is None else max_itr
    if m is None or m <= 0:
        raise ValueError("poly_lr needs max_itr > 0")
    if not 0 <= itr <= m:
        raise ValueError(f"iteration {itr} outside [0, {m}]")
    return cfg.lr_init * (1.0 - itr / m) ** cfg.gamma


@dataclass
class TrainingData:
    images: np.ndarray  # [N,3,H,W] in [0,1]
    saliency: np.ndarray  # [N,1,H,W] pseudo mask
    boundary: np.ndarray  # [N,1,H,W] pseudo boundary
    offsets: np.ndarray  # [N,2,H,W] pseudo offsets
    t_star: np.ndarray  # [N]
    edges: np.ndarray | None = None  # [N,1,H,W] Canny planes

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, idx) -> "TrainingData":
        return TrainingData(self.images[idx], self.saliency[idx], self.boundary[idx], self.offsets[idx],
                            self.t_star[idx], None if self.edges is None else self.edges[idx])


@dataclass
class TrainResult:
    losses: dict[str, list[float]] = field(default_factory=dict)
    iterations: int = 0


class SGD:
    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float, clip_norm: float | None = None) -> float:
        sq = sum(float(np.sum(p.grad ** 2)) for p in self.params.values() if p.grad is not None)
        norm = math.sqrt(sq)
        k = 1.0 if not clip_norm or norm <= clip_norm else clip_norm / norm
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += k * p.grad
            p.data -= lr * v
        return norm


def _branch_losses(model: WsidNet, branch: str, b: TrainingData, w: LossWeights) -> dict[str, Tensor]:
    x = Tensor(b.images)
    if branch == "saliency":
        return {"saliency": scale(loss_saliency(model.saliency(x), b.saliency), w.saliency)}
    out = {}
    if branch in ("boundary", "joint"):
        out["boundary"] = scale(loss_boundary(model.boundary(x, b.edges), b.boundary), w.boundary)
    if branch in ("centroid", "joint"):
        V = model.centroid(x)
        mask = b.saliency[:, 0] >= 0.5
        out["centroid"] = scale(loss_centroid(V, b.offsets, mask), w.centroid)
        if w.subitizing > 0:
            out["subitizing"] = scale(loss_subitizing(V, b.saliency, b.t_star), w.subitizing)
    return out


def _run_phase(model: WsidNet, phase: str, data: TrainingData, cfg: TrainConfig, w: LossWeights,
               result: TrainResult, log_fn: Callable[[str], None] | None) -> None:
    if phase == "saliency":
        params = model.branch_params("saliency")
    else:
        groups = ("boundary", "centroid") if phase == "joint" else (phase,)
        params = {}
        for g in groups:
            params.update(model.branch_params(g))
    opt = SGD(params, cfg.momentum)
    rng = np.random.default_rng(cfg.seed + {"saliency": 0, "boundary": 1, "centroid": 2, "joint": 3}[phase])
    n = len(data)
    per_epoch = max(1, math.ceil(n / cfg.batch))
    max_itr = cfg.max_itr or cfg.epochs * per_epoch
    itr = 0
    while itr < max_itr:
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch):
            if itr >= max_itr:
                break
            b = data.batch(order[s:s + cfg.batch])
            losses = _branch_losses(model, phase, b, w)
            total = None
            for name, l in losses.items():
                val = float(l.data)
                if not np.isfinite(val):
                    raise TrainingDiverged(f"{name} loss became {val} at iteration {itr} of phase {phase} "
                                           f"(lr={poly_lr(itr, cfg, max_itr):.3g}); lower --lr or check inputs")
                result.losses.setdefault(name, []).append(val)
                total = l if total is None else add(total, l)
            opt.zero_grad()
            if total is not None and total.requires_grad:
                total.backward()
                opt.step(poly_lr(itr, cfg, max_itr), cfg.clip_norm)
            if log_fn is not None:
                log_fn(f"phase={phase} itr={itr} " + " ".join(f"{k}={float(v.data):.6f}" for k, v in losses.items()))
            itr += 1
    result.iterations += itr


def train(model: WsidNet, data: TrainingData, cfg: TrainConfig, loss_weights: LossWeights | None = None,
          branches: Iterable[str] = BRANCHES, log_fn: Callable[[str], None] | None = None) -> TrainResult:
    """Train the requested branches.

    The saliency branch is optimized on its own. Boundary and centroid
    share the DA weights, so when both are requested they are optimized
    together with their summed losses (each loss only reaches its own
    branch and the shared DA).
    """
    w = loss_weights or LossWeights()
    branches = tuple(branches)
    for b in branches:
        if b not in BRANCHES:
            raise ValueError(f"unknown branch {b!r}")
    if data.edges is None and model.be is not None and "boundary" in branches:
        from .boundary import canny_planes
        data = TrainingData(data.images, data.saliency, data.boundary, data.offsets, data.t_star,
                            canny_planes(data.images))
    result = TrainResult()
    if "saliency" in branches:
        _run_phase(model, "saliency", data, cfg, w, result, log_fn)
    if "boundary" in branches and "centroid" in branches:
        _run_phase(model, "joint", data, cfg, w, result, log_fn)
    elif "boundary" in branches:
        _run_phase(model, "boundary", data, cfg, w, result, log_fn)
    elif "centroid" in branches:
        _run_phase(model, "centroid", data, cfg, w, result, log_fn)
    return result
