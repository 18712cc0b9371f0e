import math

import numpy as np
import pytest

from wsid import centroids as cf
from wsid import network as net
from wsid import synth
from wsid.attention import DaWeights
from wsid.tensor import ShapeError, Tensor, grad_check, mean, mul


@pytest.fixture(scope="module")
def scene():
    s = synth.gen_scene(7)
    s.pseudo = synth.pseudo_supervision(s)
    return s


def _zero(obj):
    for p in obj.params("z").values():
        p.data = np.zeros_like(p.data)


def test_pyramid_sizes(rng):
    enc = net.Encoder(rng)
    pyr = net.backbone_forward(Tensor(rng.uniform(0, 1, (1, 3, 64, 64))), enc)
    assert [f.shape[2:] for f in pyr] == [(32, 32), (16, 16), (8, 8), (4, 4), (4, 4)]
    assert [f.shape[1] for f in pyr] == list(net.ENC_CHANNELS)


def test_zero_encoder_gives_bias_features(rng):
    enc = net.Encoder(rng)
    _zero(enc)
    pyr = net.backbone_forward(Tensor(np.zeros((1, 3, 32, 32))), enc)
    assert all(not f.data.any() for f in pyr)


def test_zero_heads_give_neutral_maps(rng):
    pyr = net.backbone_forward(Tensor(rng.uniform(0, 1, (1, 3, 32, 32))), net.Encoder(rng))
    ch, bh, sh = net.CentroidHead(rng), net.BoundaryHead(rng, be_channels=0), net.SaliencyHead(rng)
    for h in (ch, bh, sh):
        _zero(h)
    da = [DaWeights.init(c, rng) for c in net.ENC_CHANNELS]
    assert np.all(net.centroid_branch_forward(pyr, da, ch, (32, 32)).data == 0.0)
    assert np.all(net.boundary_branch_forward(pyr, da, None, bh, (32, 32)).data == 0.5)
    assert np.all(net.saliency_branch_forward(pyr, sh, (32, 32)).data == 0.5)


def test_head_topology_channel_counts(rng):
    ch = net.CentroidHead(rng)
    c1, c2, c3, c4, c5 = net.ENC_CHANNELS
    assert ch.fh.in_channels == c3 + c4 + c5
    assert ch.conv_a.in_channels == ch.fh.out_channels + c1 + c2
    bh = net.BoundaryHead(rng, be_channels=8)
    assert bh.conv.in_channels == sum(net.ENC_CHANNELS) + 8


def test_boundary_split_projection_equals_concat_form(rng):
    """Projecting each level before upsampling must equal conv over the upsampled concat."""
    from wsid.tensor import bilinear_resize, concat_channels, conv2d, sigmoid
    pyr = net.backbone_forward(Tensor(rng.uniform(0, 1, (1, 3, 32, 32))), net.Encoder(rng))
    da = [DaWeights.init(c, rng, gain=1.0) for c in net.ENC_CHANNELS]
    fb = Tensor(rng.normal(size=(1, 8, 32, 32)))
    bh = net.BoundaryHead(rng)
    got = net.boundary_branch_forward(pyr, da, fb, bh, (32, 32)).data
    refined = net.refine(pyr, da)
    stack = concat_channels([bilinear_resize(f, 32, 32) for f in refined] + [fb])
    ref = sigmoid(conv2d(stack, bh.conv.w, bh.conv.b)).data
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_mismatched_channels_rejected(rng):
    pyr = net.backbone_forward(Tensor(rng.uniform(0, 1, (1, 3, 32, 32))), net.Encoder(rng))
    other = net.CentroidHead(rng, channels=(8, 32, 64, 64, 64))
    with pytest.raises(ShapeError):
        net.centroid_branch_forward(pyr, None, other, (32, 32))
    with pytest.raises(ShapeError):
        net.boundary_branch_forward(pyr, None, Tensor(np.zeros((1, 4, 32, 32))), net.BoundaryHead(rng), (32, 32))
    with pytest.raises(ShapeError):
        net.saliency_branch_forward(pyr[:4], net.SaliencyHead(rng), (32, 32))


def test_saliency_logit_scaling_moves_away_from_half(rng):
    pyr = net.backbone_forward(Tensor(rng.uniform(0, 1, (1, 3, 32, 32))), net.Encoder(rng))
    sh = net.SaliencyHead(rng)
    s1 = net.saliency_branch_forward(pyr, sh, (32, 32)).data
    sh.out.w.data *= 3.0
    sh.out.b.data *= 3.0
    s3 = net.saliency_branch_forward(pyr, sh, (32, 32)).data
    assert np.all(np.abs(s3 - 0.5) >= np.abs(s1 - 0.5))


def test_branch_gradcheck(rng):
    img = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    model = net.WsidNet(3)
    for b in model.da:
        b.conv7_b.data = rng.normal(size=1)
    r = Tensor(rng.normal(size=(1, 2, 16, 16)))
    ps = list(model.branch_params("centroid").values())
    pick = [ps[i] for i in (0, len(ps) // 2, len(ps) - 1)]
    err = grad_check(lambda *p: mean(mul(model.centroid(img), r)), pick, eps=1e-4, max_entries=5,
                     rng=np.random.default_rng(0))
    assert err < 1e-6


# -- losses -----------------------------------------------------------------------
def test_saliency_loss_cases(rng):
    y = (rng.uniform(size=(1, 1, 6, 6)) > 0.5).astype(float)
    near = np.where(y > 0, 0.99, 0.01)
    assert net.loss_saliency(Tensor(near), y).data < 0.011
    assert abs(net.loss_saliency(Tensor(np.full(y.shape, 0.5)), y).data - math.log(2)) < 1e-12
    S = rng.uniform(0.05, 0.95, y.shape)
    ref = -np.mean(y * np.log(S) + (1 - y) * np.log(1 - S))
    assert abs(net.loss_saliency(Tensor(S), y).data - ref) < 1e-12


def test_boundary_loss_cases(rng):
    y = np.zeros((1, 1, 8, 8))
    y[0, 0, 2, :] = 1
    assert net.loss_boundary(Tensor(np.clip(y, 1e-9, 1 - 1e-9)), y).data < 1e-6
    assert abs(net.loss_boundary(Tensor(np.full(y.shape, 0.5)), y).data - math.log(2)) < 1e-12
    B = rng.uniform(0.05, 0.95, y.shape)
    pos, neg = y > 0, y == 0
    ref = 0.5 * (-np.log(B[pos]).mean()) + 0.5 * (-np.log(1 - B[neg]).mean())
    assert abs(net.loss_boundary(Tensor(B), y).data - ref) < 1e-12


def test_centroid_loss_cases(rng):
    V = rng.uniform(-0.5, 0.5, (1, 2, 5, 5))
    mask = rng.uniform(size=(1, 5, 5)) > 0.4
    assert net.loss_centroid(Tensor(V), V, mask).data == 0.0
    Vt = Tensor(V, True)
    out = net.loss_centroid(Vt, V + 0.1, np.zeros((1, 5, 5), bool))
    assert out.data == 0.0 and not out.requires_grad
    P = rng.uniform(-0.5, 0.5, V.shape)
    total, n = 0.0, 0
    for y in range(5):
        for x in range(5):
            if mask[0, y, x]:
                total += abs(V[0, 0, y, x] - P[0, 0, y, x]) + abs(V[0, 1, y, x] - P[0, 1, y, x])
                n += 1
    assert abs(net.loss_centroid(Tensor(V), P, mask).data - total / n) < 1e-12


def _two_blob_field(h=24, w=24):
    sal = np.zeros((1, 1, h, w))
    sal[0, 0, 2:9, 2:9] = 1.0
    sal[0, 0, 14:21, 14:21] = 1.0
    lab = np.zeros((h, w), int)
    lab[2:9, 2:9], lab[14:21, 14:21] = 1, 2
    return sal, synth.centroid_offsets(lab)[None]


def test_subitizing_loss_values():
    sal, V = _two_blob_field()
    # both peaks far above tau: soft count is 2 up to sigmoid saturation
    assert net.loss_subitizing(Tensor(V), sal, 2).data < 1e-12
    # tau_mass follows the label, so the oracle recomputes the count with t*=1
    tau = cf.default_tau_mass(sal.sum(), 1)
    c = float(cf.soft_count(cf.splat_votes(V, sal), tau_mass=tau).data[0])
    assert abs(net.loss_subitizing(Tensor(V), sal, 1).data - (1 - c) ** 2) < 1e-12
    assert 1.0 < c < 2.0


def test_subitizing_gradient_only_at_salient_pixels(rng):
    sal, V0 = _two_blob_field()
    V = Tensor(V0 + rng.uniform(-0.3, 0.3, V0.shape), True)
    S = Tensor(sal * 0.9 + 0.05, True)
    net.loss_subitizing(V, S, 3).backward()
    assert S.grad is None
    off = np.broadcast_to(S.data < 0.5, V.shape)
    assert np.all(V.grad[off] == 0)
    assert np.abs(V.grad[~off]).max() > 0


def test_subitizing_gradcheck_8x8_frozen_mask(rng):
    h = w = 8
    sal = np.zeros((1, 1, h, w))
    sal[0, 0, 1:4, 1:4] = 1
    sal[0, 0, 5:8, 5:8] = 1
    lab = np.zeros((h, w), int)
    lab[1:4, 1:4], lab[5:8, 5:8] = 1, 2
    V0 = synth.centroid_offsets(lab)[None]
    V = Tensor(V0 + rng.uniform(-0.2, 0.2, V0.shape), True)
    maxima = cf.local_max_mask(cf.smooth_votes(cf.splat_votes(V.data, sal)).data[0, 0])[None, None]
    err = grad_check(lambda v: net.loss_subitizing(v, sal, 1, maxima=maxima), [V], eps=1e-5)
    assert err < 1e-4


def test_losses_non_negative(rng):
    for _ in range(10):
        S = Tensor(rng.uniform(0, 1, (1, 1, 6, 6)))
        y = (rng.uniform(size=(1, 1, 6, 6)) > 0.5).astype(float)
        V = Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)))
        assert net.loss_saliency(S, y).data >= 0 and net.loss_boundary(S, y).data >= 0
        assert net.loss_centroid(V, rng.uniform(-1, 1, (1, 2, 6, 6)), y[:, 0] > 0).data >= 0
        assert net.loss_subitizing(V, S, int(rng.integers(0, 4))).data >= 0


# -- schedule and training -------------------------------------------------------------
def test_poly_lr_endpoints():
    cfg = net.TrainConfig(max_itr=100)
    assert net.poly_lr(0, cfg) == 0.01
    assert net.poly_lr(100, cfg) == 0.0
    assert abs(net.poly_lr(50, net.TrainConfig(max_itr=100, gamma=1.0)) - 0.005) < 1e-15
    with pytest.raises(ValueError):
        net.poly_lr(101, cfg)
    with pytest.raises(ValueError):
        net.TrainConfig(lr_init=0)


def test_training_is_bit_reproducible(scene):
    td = synth.training_data([scene, scene])
    outs = []
    for _ in range(2):
        m = net.WsidNet(5)
        r = net.train(m, td, net.TrainConfig(max_itr=3, batch=2, seed=4))
        outs.append((r.losses, {k: v.data.tobytes() for k, v in m.params().items()}))
    assert outs[0] == outs[1]


def test_no_lsu_drops_the_term(scene):
    td = synth.training_data([scene])
    r = net.train(net.WsidNet(0), td, net.TrainConfig(max_itr=2, batch=1),
                  net.LossWeights(subitizing=0.0), branches=("centroid",))
    assert "subitizing" not in r.losses and len(r.losses["centroid"]) == 2


def test_divergence_aborts(scene):
    td = synth.training_data([scene])
    td.images[:] = np.nan
    with pytest.raises(net.TrainingDiverged, match="iteration 0"):
        net.train(net.WsidNet(0), td, net.TrainConfig(max_itr=2, batch=1), branches=("saliency",))


def test_single_sample_overfit(scene):
    td = synth.training_data([scene])
    r1 = net.train(net.WsidNet(0), td, net.TrainConfig(lr_init=0.05, batch=1, max_itr=500),
                   branches=("saliency",))
    r2 = net.train(net.WsidNet(0), td, net.TrainConfig(lr_init=0.01, batch=1, max_itr=500),
                   branches=("boundary", "centroid"))
    losses = {**r1.losses, **r2.losses}
    for name in ("saliency", "boundary", "centroid", "subitizing"):
        v = losses[name]
        assert np.mean(v[-10:]) < 0.1 * v[0], name
