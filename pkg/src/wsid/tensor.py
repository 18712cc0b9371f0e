"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure that pushes the
output gradient back into them. ``Tensor.backward`` walks the graph in
reverse topological order. Feature maps use NCHW layout throughout.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# -- kink tracking -------------------------------------------------------------------
# Piecewise ops (relu, abs, clamp, max, bilinear splatting) report their switch
# pattern and how close their input came to a switching point while a monitor
# is active. Gradient checks use this to tell whether a finite-difference
# step stayed on one smooth piece.
_KINK_STACK: list[dict] = []


@contextmanager
def kink_monitor():
    """Collect switch patterns and the smallest distance-to-kink seen inside the block."""
    rec = {"gap": np.inf, "patterns": []}
    _KINK_STACK.append(rec)
    try:
        yield rec
    finally:
        _KINK_STACK.pop()
        if _KINK_STACK:
            _KINK_STACK[-1]["gap"] = min(_KINK_STACK[-1]["gap"], rec["gap"])
            _KINK_STACK[-1]["patterns"] += rec["patterns"]


def monitoring_kinks() -> bool:
    return bool(_KINK_STACK)


def note_kink(gap, pattern=None) -> None:
    if _KINK_STACK:
        rec = _KINK_STACK[-1]
        g = np.asarray(gap, dtype=np.float64)
        if g.size:
            rec["gap"] = min(rec["gap"], float(g.min()))
        if pattern is not None:
            rec["patterns"].append(np.asarray(pattern).tobytes())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is not attached to a graph (no input requires grad)")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if parent is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(_wrap(other)))

    def __pow__(self, p):
        return power(self, float(p))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg, _parents=tuple(parents) if rg else (), op=op)
    if rg:
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} against {b.shape}") from None


# -- elementwise -----------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: ((a, unbroadcast(g, a.shape)), (b, unbroadcast(g, b.shape))))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: ((a, -g),))


def scale(a: Tensor, k: float) -> Tensor:
    return _make(a.data * k, (a,), "scale", lambda g: ((a, g * k),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting (e.g. [N,C,1,1] x [N,C,H,W])."""
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: ((a, unbroadcast(g * b.data, a.shape)),
                            (b, unbroadcast(g * a.data, b.shape))))


def reciprocal(a: Tensor) -> Tensor:
    inv = 1.0 / a.data
    return _make(inv, (a,), "reciprocal", lambda g: ((a, -g * inv * inv),))


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), "pow", lambda g: ((a, g * p * a.data ** (p - 1.0)),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), "exp", lambda g: ((a, g * e),))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: ((a, g / a.data),))


def abs_(a: Tensor) -> Tensor:
    if _KINK_STACK:
        note_kink(np.abs(a.data), a.data > 0)
    return _make(np.abs(a.data), (a,), "abs", lambda g: ((a, g * np.sign(a.data)),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    if _KINK_STACK:
        note_kink(np.minimum(np.abs(a.data - lo), np.abs(a.data - hi)), inside)
    return _make(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: ((a, g * inside),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    return _make(s, (a,), "sigmoid", lambda g: ((a, g * s * (1.0 - s)),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    if _KINK_STACK:
        note_kink(np.abs(a.data), on)
    return _make(a.data * on, (a,), "relu", lambda g: ((a, g * on),))


# -- reductions and reshapes --------------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape)),)

    return _make(out, (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: ((a, g.reshape(a.shape)),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    return _make(a.data @ b.data, (a, b), "matmul",
                 lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1, preserving argument order."""
    if not parts:
        raise ShapeError("concat_channels: no inputs")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.ndim != len(ref) or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: input {i} has shape {p.shape}, expected (N, *, {ref[2:]}) with N={ref[0]}")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=1)

    def bw(g):
        return tuple((p, g[:, bounds[i]:bounds[i + 1]]) for i, p in enumerate(parts))

    return _make(out, tuple(parts), "concat", bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return ((a, full),)

    return _make(a.data[:, start:stop].copy(), (a,), "slice", bw)


def split_channels(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != a.shape[1]:
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not sum to C={a.shape[1]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_channels(a, start, start + s))
        start += s
    return out


# -- convolution -----------------------------------------------------------------
def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad=0) -> Tensor:
    """2-D cross-correlation. ``pad`` is an int or a (pad_h, pad_w) pair."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input channels C={C} but weight expects {Cw} (dim 1 of weight)")
    if b is not None and b.shape != (K,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match K={K}")
    ph, pw = _pair(pad)
    if ph < 0 or pw < 0 or stride < 1:
        raise ValueError(f"conv2d: need pad >= 0 and stride >= 1, got pad={pad} stride={stride}")
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1

    wmat = w.data.reshape(K, C * kh * kw)
    xt = x.data.transpose(1, 0, 2, 3)
    if kh == kw == 1 and stride == 1 and not (ph or pw):
        cols = np.ascontiguousarray(xt).reshape(C, N * H * W)
    else:
        # patch matrix (C*kh*kw, N*Ho*Wo), one contiguous slab per kernel tap
        xp = np.pad(xt, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xt
        cols = np.empty((C, kh, kw, N, Ho, Wo))
        for u in range(kh):
            for v in range(kw):
                cols[:, u, v] = xp[:, :, u:u + stride * (Ho - 1) + 1:stride, v:v + stride * (Wo - 1) + 1:stride]
        cols = cols.reshape(C * kh * kw, N * Ho * Wo)
    out = (wmat @ cols).reshape(K, N, Ho, Wo)
    if b is not None:
        out += b.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gk = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(K, N * Ho * Wo)
        res = []
        if w.requires_grad:
            res.append((w, (gk @ cols.T).reshape(w.shape)))
        if b is not None and b.requires_grad:
            res.append((b, gk.sum(axis=1)))
        if x.requires_grad:
            gcols = (wmat.T @ gk).reshape(C, kh, kw, N, Ho, Wo)
            if kh == kw == 1 and stride == 1 and not (ph or pw):
                res.append((x, gcols[:, 0, 0].transpose(1, 0, 2, 3)))
                return tuple(res)
            gxp = np.zeros((C, N, Hp, Wp))
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + stride * (Ho - 1) + 1:stride, v:v + stride * (Wo - 1) + 1:stride] += gcols[:, u, v]
            res.append((x, gxp[:, :, ph:ph + H, pw:pw + W].transpose(1, 0, 2, 3)))
        return tuple(res)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "conv2d", bw)


# -- pooling -------------------------------------------------------------------
def pool_spatial(x: Tensor, mode: str = "avg") -> Tensor:
    """Global pooling over H, W -> [N, C, 1, 1]."""
    if x.ndim != 4:
        raise ShapeError(f"pool_spatial: expected NCHW, got {x.shape}")
    N, C, H, W = x.shape
    if H < 1 or W < 1:
        raise ShapeError("pool_spatial: empty spatial extent")
    if mode == "avg":
        return mean(x, axis=(2, 3), keepdims=True)
    if mode != "max":
        raise ValueError(f"pool_spatial: unknown mode {mode!r}")
    flat = x.data.reshape(N, C, H * W)
    idx = flat.argmax(axis=2)  # first maximum in row-major scan
    if _KINK_STACK and H * W > 1:
        top2 = np.sort(flat, axis=2)[..., -2:]
        note_kink(top2[..., 1] - top2[..., 0], idx)
    out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(N, C, 1, 1)

    def bw(g):
        gx = np.zeros((N, C, H * W))
        np.put_along_axis(gx, idx[..., None], g.reshape(N, C, 1), axis=2)
        return ((x, gx.reshape(x.shape)),)

    return _make(out, (x,), "maxpool_spatial", bw)


def pool_channel(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-pixel pooling across channels -> [N, 1, H, W]."""
    if x.ndim != 4:
        raise ShapeError(f"pool_channel: expected NCHW, got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("pool_channel: empty channel extent")
    if mode == "avg":
        return mean(x, axis=1, keepdims=True)
    if mode != "max":
        raise ValueError(f"pool_channel: unknown mode {mode!r}")
    idx = x.data.argmax(axis=1)[:, None]
    if _KINK_STACK and x.shape[1] > 1:
        top2 = np.sort(x.data, axis=1)[:, -2:]
        note_kink(top2[:, 1] - top2[:, 0], idx)
    out = np.take_along_axis(x.data, idx, axis=1)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return ((x, gx),)

    return _make(out, (x,), "maxpool_channel", bw)


def mlp2(x: Tensor, w1: Tensor, w2: Tensor, reduction: int | None = None) -> Tensor:
    """One-hidden-layer MLP without biases: ``relu(x @ w1.T) @ w2.T``.

    ``w1`` is [C/r, C] and ``w2`` is [C, C/r].
    """
    C = x.shape[-1]
    if reduction is not None:
        if reduction < 1 or C % reduction:
            raise ShapeError(f"mlp2: reduction {reduction} does not divide C={C}")
        if C // reduction < 1:
            raise ShapeError("mlp2: hidden width must be >= 1")
        if w1.shape != (C // reduction, C) or w2.shape != (C, C // reduction):
            raise ShapeError(f"mlp2: weights {w1.shape}, {w2.shape} do not match C={C}, reduction={reduction}")
    return matmul(relu(matmul(x, _transpose(w1))), _transpose(w2))


def _transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), "transpose", lambda g: ((a, g.T),))


# -- resampling ---------------------------------------------------------------------
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix (n_out x n_in), align_corners=False convention."""
    if n_in < 1 or n_out < 1:
        raise ValueError("bilinear_matrix: sizes must be >= 1")
    R = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1.0 - lam)
    np.add.at(R, (rows, i1), lam)
    return R


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: output size must be >= 1, got {out_h}x{out_w}")
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return x
    Ry, Rx = bilinear_matrix(H, out_h), bilinear_matrix(W, out_w)
    out = Ry @ x.data @ Rx.T
    return _make(out, (x,), "resize", lambda g: ((x, Ry.T @ g @ Rx),))


# -- finite-difference checking --------------------------------------------------------
FLOOR = 1e-6


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               check: Iterable[int] | None = None) -> float:
    """Max relative error between analytic and finite-difference gradients.

    ``fn(*inputs)`` must return a scalar tensor. Relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-6)``. ``max_entries`` subsamples entries of
    large inputs; ``check`` restricts the test to the given input indices.
    See :func:`grad_check_report` for how piecewise ops are handled.
    """
    rep = grad_check_report(fn, inputs, eps, max_entries, rng, check)
    return max(rep.smooth_err, rep.kink_err)


class GradReport:
    """Worst relative errors split by whether the stencil touched a switch point."""

    def __init__(self):
        self.smooth_err = 0.0  # centered 4-point stencil stayed on one piece
        self.kink_err = 0.0  # one side crossed a switch; one-sided stencil used
        self.n_smooth = 0
        self.n_kink = 0
        self.n_skipped = 0  # both sides crossed: not differentiable at this scale
        self.kink_gap = np.inf

    def __repr__(self):
        return (f"GradReport(smooth_err={self.smooth_err:.3e}, kink_err={self.kink_err:.3e}, "
                f"n_smooth={self.n_smooth}, n_kink={self.n_kink}, n_skipped={self.n_skipped})")


def grad_check_report(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4,
                      max_entries: int | None = None, rng: np.random.Generator | None = None,
                      check: Iterable[int] | None = None) -> GradReport:
    """Finite-difference check that is aware of piecewise ops.

    The numeric derivative is the 4-point centered stencil at steps +-eps,
    +-2 eps. If the switch pattern of any relu/abs/clamp/max/splat op differs
    from the unperturbed pass on one side only, the second-order one-sided
    stencil on the other side is used and the entry counts as a kink entry;
    if both sides switch, the entry is skipped.
    Relative errors ignore differences below the stencil's rounding noise.
    """
    for t in inputs:
        t.grad = None
    with kink_monitor() as rec:
        loss = fn(*inputs)
    if loss.data.size != 1:
        raise ShapeError(f"grad_check: fn must return a scalar, got shape {loss.shape}")
    base_pat, f0 = rec["patterns"], loss.data.item()
    loss.backward()
    rng = rng if rng is not None else np.random.default_rng(0)
    rep = GradReport()
    rep.kink_gap = rec["gap"]

    def probe(flat, j, orig, d):
        flat[j] = orig + d
        with kink_monitor() as r:
            v = fn(*inputs).data.item()
        flat[j] = orig
        return v, r["patterns"] == base_pat

    which = range(len(inputs)) if check is None else check
    for i in which:
        t = inputs[i]
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for j in idx:
            orig = flat[j]
            (p1, ok1), (p2, ok2) = probe(flat, j, orig, eps), probe(flat, j, orig, 2 * eps)
            (m1, ok3), (m2, ok4) = probe(flat, j, orig, -eps), probe(flat, j, orig, -2 * eps)
            plus, minus = ok1 and ok2, ok3 and ok4
            a = float(analytic.reshape(-1)[j])
            if plus and minus:
                num = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
            elif plus:
                num = (-3.0 * f0 + 4.0 * p1 - p2) / (2.0 * eps)
            elif minus:
                num = (3.0 * f0 - 4.0 * m1 + m2) / (2.0 * eps)
            else:
                rep.n_skipped += 1
                continue
            # discount the rounding noise of the stencil itself, which dominates for tiny derivatives
            noise = 8.0 * np.finfo(float).eps * max(abs(f0), abs(p1), abs(m1), abs(p2), abs(m2)) / eps
            err = max(abs(a - num) - noise, 0.0) / max(abs(a), abs(num), FLOOR)
            if plus and minus:
                rep.smooth_err = max(rep.smooth_err, err)
                rep.n_smooth += 1
            else:
                rep.kink_err = max(rep.kink_err, err)
                rep.n_kink += 1
    return rep
