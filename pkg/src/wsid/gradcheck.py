"""Finite-difference gradient suites for every differentiable component.

Each case builds a seeded random configuration, reduces the op output to a
scalar with a fixed random projection, and compares analytic and central
difference gradients. Entries whose finite-difference stencil stays on one
smooth piece of every relu/abs/clamp/max/splat op are held to the smooth
tolerance; entries next to a switch point (checked with a one-sided stencil)
are held to the kink tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import centroids as cf
from . import network as net
from .attention import DaWeights, channel_attention, da_forward, spatial_attention
from .boundary import BeWeights, ResBlock, be_forward, canny_planes
from .tensor import (GradReport, Tensor, bilinear_resize, concat_channels, conv2d, exp, grad_check_report, log, matmul,
                     mean, mlp2, mul, pool_channel, pool_spatial, sigmoid, slice_channels)

SMOOTH_TOL = 1e-6
KINK_TOL = 1e-4
EPS = 1e-4
BRANCH_PARAMS = 4  # parameter tensors probed per branch case
MODULES = ("core", "da", "be", "branches", "losses")


@dataclass
class CaseResult:
    module: str
    op: str
    config: int
    report: GradReport

    @property
    def passed(self) -> bool:
        return self.report.smooth_err < SMOOTH_TOL and self.report.kink_err < KINK_TOL


def _rand(rng, *shape, scale=1.0, grad=True) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), grad)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=out.shape))
    return lambda y: mean(mul(y, r))


def _case(module, op, config, fn, inputs, rng, max_entries=None, n_params=None) -> CaseResult:
    """Scalarize ``fn`` with a random projection and run the finite-difference check.

    With ``n_params`` only the first input plus that many randomly chosen
    parameter tensors are probed; configurations rotate the choice.
    """
    proj = _project(fn(*inputs), np.random.default_rng(rng.integers(1 << 31)))
    check = None
    if n_params is not None and len(inputs) > n_params + 1:
        check = [0] + sorted((1 + rng.choice(len(inputs) - 1, n_params, replace=False)).tolist())
    rep = grad_check_report(lambda *xs: proj(fn(*xs)), inputs, eps=EPS, max_entries=max_entries,
                            rng=np.random.default_rng(config), check=check)
    return CaseResult(module, op, config, rep)


def _scalar_case(module, op, config, fn, inputs, max_entries=None, check=None) -> CaseResult:
    rep = grad_check_report(fn, inputs, eps=EPS, max_entries=max_entries,
                            rng=np.random.default_rng(config), check=check)
    return CaseResult(module, op, config, rep)


# -- suites ---------------------------------------------------------------------------
def suite_core(seed: int, configs: int) -> list[CaseResult]:
    out = []
    for c in range(configs):
        rng = np.random.default_rng([seed, 0, c])
        n, ch, h, w = 1 + c % 2, 2 + c % 3, 4 + c % 4, 5 + c % 3
        x = _rand(rng, n, ch, h, w)
        k = _rand(rng, 3, ch, 3, 3, scale=0.5)
        b = _rand(rng, 3)
        stride, pad = 1 + c % 2, c % 2
        out.append(_case("core", "conv2d", c, lambda x, k, b: conv2d(x, k, b, stride, pad), [x, k, b], rng))
        out.append(_case("core", "bilinear_resize", c, lambda x: bilinear_resize(x, h + 3, w - 2), [x], rng))
        out.append(_case("core", "sigmoid_exp_log", c, lambda x: log(add1(exp(sigmoid(x)))), [x], rng))
        y = _rand(rng, n, ch, h, w)
        out.append(_case("core", "mul_broadcast", c, lambda x, s: mul(x, s), [x, _rand(rng, 1, ch, 1, 1)], rng))
        out.append(_case("core", "concat_slice", c,
                         lambda x, y: slice_channels(concat_channels([x, y]), 1, 2 * ch - 1), [x, y], rng))
        out.append(_case("core", "pool_avg", c, lambda x: pool_spatial(x, "avg"), [x], rng))
        out.append(_case("core", "pool_max", c, lambda x: pool_channel(x, "max"), [x], rng))
        a, m = _rand(rng, 3, 4), _rand(rng, 4, 2)
        out.append(_case("core", "matmul", c, matmul, [a, m], rng))
    return out


def add1(x: Tensor) -> Tensor:
    return x + 1.0


def suite_da(seed: int, configs: int) -> list[CaseResult]:
    out = []
    for c in range(configs):
        rng = np.random.default_rng([seed, 1, c])
        r = (2, 4)[c % 2]
        ch = r * (1 + c % 3)
        f = _rand(rng, 1 + c % 2, ch, 3 + c % 4, 4 + c % 3)
        w = DaWeights.init(ch, rng, r, gain=1.0)
        w.conv7_b.data = rng.normal(size=1)
        ps = list(w.params().values())
        out.append(_case("da", "channel_attention", c, lambda f, *p: channel_attention(f, w), [f] + ps, rng))
        out.append(_case("da", "spatial_attention", c, lambda f, *p: spatial_attention(f, w), [f] + ps, rng))
        out.append(_case("da", "da_forward", c, lambda f, *p: da_forward(f, w), [f] + ps, rng))
        out.append(_case("da", "mlp2", c, lambda x, a, b: mlp2(x, a, b, r), [_rand(rng, 2, ch), w.mlp_w1, w.mlp_w2],
                         rng))
    return out


def suite_be(seed: int, configs: int) -> list[CaseResult]:
    out = []
    for c in range(configs):
        rng = np.random.default_rng([seed, 2, c])
        img = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)), True)
        img.data[:, :, 4:12, 4:12] += 0.8  # give the edge plane some structure
        edges = canny_planes(img.data)
        w = BeWeights.init(rng)
        for blk in w.blocks:
            blk.b_a.data = rng.normal(0, 0.1, blk.b_a.shape)
        ps = list(w.params().values())
        out.append(_case("be", "be_forward", c, lambda x, *p: be_forward(x, w, edges), [img] + ps, rng,
                         max_entries=12))
        blk = ResBlock(_rand(rng, 4, 4, 3, 3, scale=0.3), _rand(rng, 4), _rand(rng, 4, 4, 3, 3, scale=0.3),
                       _rand(rng, 4))
        x = _rand(rng, 1, 4, 6, 6)
        out.append(_case("be", "residual_block", c, lambda x, *p: blk(x), [x, blk.w_a, blk.b_a, blk.w_b, blk.b_b],
                         rng))
    return out


def _tiny_model(rng, use_da=True):
    enc = net.Encoder(rng)
    da = [DaWeights.init(ch, rng, 4, gain=1.0) for ch in net.ENC_CHANNELS] if use_da else None
    return enc, da


def suite_branches(seed: int, configs: int) -> list[CaseResult]:
    out = []
    size = (16, 16)
    for c in range(configs):
        rng = np.random.default_rng([seed, 3, c])
        img = Tensor(rng.uniform(0, 1, (1, 3) + size), True)
        enc, da = _tiny_model(rng)
        da_ps = [p for w in da for p in w.params().values()]
        enc_ps = list(enc.params("e").values())

        out.append(_case("branches", "backbone", c, lambda x, *p: concat_channels(
            [bilinear_resize(f, 4, 4) for f in net.backbone_forward(x, enc)]), [img] + enc_ps, rng, max_entries=6, n_params=BRANCH_PARAMS))

        head = net.CentroidHead(rng)
        hp = list(head.params("h").values())
        out.append(_case("branches", "centroid_branch", c,
                         lambda x, *p: net.centroid_branch_forward(net.backbone_forward(x, enc), da, head, size),
                         [img] + enc_ps + da_ps + hp, rng, max_entries=4, n_params=BRANCH_PARAMS))

        bw = BeWeights.init(rng)
        bh = net.BoundaryHead(rng)
        edges = canny_planes(img.data)
        bp = list(bw.params().values()) + list(bh.params("b").values())
        out.append(_case("branches", "boundary_branch", c,
                         lambda x, *p: net.boundary_branch_forward(net.backbone_forward(x, enc), da,
                                                                   be_forward(x, bw, edges), bh, size),
                         [img] + enc_ps + da_ps + bp, rng, max_entries=4, n_params=BRANCH_PARAMS))

        sh = net.SaliencyHead(rng)
        sp = list(sh.params("s").values())
        out.append(_case("branches", "saliency_branch", c,
                         lambda x, *p: net.saliency_branch_forward(net.backbone_forward(x, enc), sh, size),
                         [img] + enc_ps + sp, rng, max_entries=4, n_params=BRANCH_PARAMS))
    return out


def suite_losses(seed: int, configs: int) -> list[CaseResult]:
    out = []
    for c in range(configs):
        rng = np.random.default_rng([seed, 4, c])
        n, h, w = 1 + c % 2, 6 + c % 3, 7 + c % 2
        S = Tensor(rng.uniform(0.05, 0.95, (n, 1, h, w)), True)
        y = (rng.uniform(size=(n, 1, h, w)) > 0.6).astype(float)
        out.append(_scalar_case("losses", "loss_saliency", c, lambda s: net.loss_saliency(s, y), [S]))
        out.append(_scalar_case("losses", "loss_boundary", c, lambda s: net.loss_boundary(s, y), [S]))
        V = Tensor(rng.uniform(-0.6, 0.6, (n, 2, h, w)), True)
        off = rng.uniform(-0.6, 0.6, (n, 2, h, w))
        mask = rng.uniform(size=(n, h, w)) > 0.3
        out.append(_scalar_case("losses", "loss_centroid", c, lambda v: net.loss_centroid(v, off, mask), [V]))
        out.append(_lsu_case(c, rng))
    return out


def _lsu_case(c: int, rng) -> CaseResult:
    """L_SU on a 12x12 field: noisy votes from two blobs, local-max mask frozen at the start point.

    The label (0 or 1) keeps both peaks inside the active range of the count sigmoid.
    """
    h = w = 12
    sal = np.zeros((1, 1, h, w))
    sal[0, 0, 1:5, 1:5] = 1.0
    sal[0, 0, 7:11, 7:11] = 1.0
    ys, xs = np.mgrid[0:h, 0:w]
    V0 = np.zeros((1, 2, h, w))
    for y0, y1, cx in ((1, 5, 2.5), (7, 11, 8.5)):
        blk = (slice(y0, y1), slice(y0, y1))
        V0[0, 0][blk] = (cx - xs[blk]) / (w / 2.0)
        V0[0, 1][blk] = (cx - ys[blk]) / (h / 2.0)
    spread = 0.25 + 0.05 * (c % 3)
    V = Tensor(V0 + rng.uniform(-spread, spread, V0.shape), True)
    t_star = float(c % 2)
    acc = cf.splat_votes(V.data, sal)
    A = cf.smooth_votes(acc)
    maxima = cf.local_max_mask(A.data[0, 0])[None, None]
    return _scalar_case("losses", "loss_subitizing", c,
                        lambda v: net.loss_subitizing(v, sal, t_star, maxima=maxima), [V])


SUITES: dict[str, Callable[[int, int], list[CaseResult]]] = {
    "core": suite_core, "da": suite_da, "be": suite_be, "branches": suite_branches, "losses": suite_losses,
}


def run(module: str = "all", seed: int = 0, configs: int = 20) -> list[CaseResult]:
    names = MODULES if module == "all" else (module,)
    out = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown gradcheck module {name!r}; choose from {', '.join(MODULES)} or all")
        out += SUITES[name](seed, configs)
    return out


def summarize(results: list[CaseResult]) -> list[str]:
    """One line per (module, op): worst errors over its configurations and the verdict."""
    groups: dict[tuple[str, str], list[CaseResult]] = {}
    for r in results:
        groups.setdefault((r.module, r.op), []).append(r)
    lines = []
    for (mod, op), rs in groups.items():
        smooth = max(r.report.smooth_err for r in rs)
        kink = max(r.report.kink_err for r in rs)
        n_kink = sum(r.report.n_kink for r in rs)
        n_skip = sum(r.report.n_skipped for r in rs)
        ok = all(r.passed for r in rs)
        lines.append(f"module={mod} op={op} configs={len(rs)} max_rel_err_smooth={smooth:.3e} "
                     f"max_rel_err_kink={kink:.3e} kink_entries={n_kink} skipped={n_skip} "
                     f"status={'PASS' if ok else 'FAIL'}")
    return lines
