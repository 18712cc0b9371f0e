import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from wsid.boundary import (BeWeights, ResBlock, be_forward, canny, canny_planes, canny_rgb, hysteresis,
                           rgb_to_gray)
from wsid.tensor import Tensor, grad_check, mean, mul


def square_image(n=64, lo=22, hi=42):
    img = np.zeros((n, n))
    img[lo:hi, lo:hi] = 1.0
    return img


def test_constant_image_has_no_edges():
    assert canny(np.full((16, 16), 0.3)).sum() == 0


def test_square_gives_single_closed_ring():
    img = square_image()
    e = canny(img, 1.0, 0.1, 0.2).astype(bool)
    sq = img.astype(bool)
    outline = sq ^ ndimage.binary_erosion(sq)
    near = ndimage.binary_dilation(outline, np.ones((3, 3), bool))
    assert e.any() and np.all(e <= near)
    # one 8-connected curve that encloses the square interior
    _, n = ndimage.label(e, np.ones((3, 3), bool))
    assert n == 1
    outside, _ = ndimage.label(~e, np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool))
    assert outside[32, 32] != outside[0, 0]
    # every outline pixel has a detected edge within 1 px
    assert np.all(outline <= ndimage.binary_dilation(e, np.ones((3, 3), bool)))


def test_vertical_step_gives_one_column():
    img = np.zeros((20, 20))
    img[:, 10:] = 1.0
    e = canny(img).astype(bool)
    inner = e[4:-4]
    cols = np.unique(np.nonzero(inner)[1])
    assert len(cols) == 1 and cols[0] in (9, 10)
    assert inner[:, cols[0]].all()


@settings(max_examples=20, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 2 ** 31 - 1))
def test_invariant_to_constant_offset(c, seed):
    r = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(r.uniform(0, 1, (24, 24)), 1.5)
    img[6:14, 8:18] += 1.0
    assert np.array_equal(canny(img), canny(img + c))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_hysteresis_weak_pixels_connect_to_strong(seed):
    r = np.random.default_rng(seed)
    weak = r.uniform(size=(20, 20)) < 0.45
    strong = weak & (r.uniform(size=(20, 20)) < 0.1)
    out = hysteresis(strong, weak)
    lab, _ = ndimage.label(weak, np.ones((3, 3), bool))
    keep = np.unique(lab[strong])
    expect = np.isin(lab, keep[keep > 0])
    assert np.array_equal(out.astype(bool), expect)


def test_canny_argument_errors():
    with pytest.raises(ValueError):
        canny(np.zeros((0, 0)))
    with pytest.raises(ValueError):
        canny(np.zeros((5, 5)), low=0.3, high=0.2)
    with pytest.raises(ValueError):
        canny(np.zeros((5, 5)), sigma=0)


def test_gray_weights():
    rgb = np.stack([np.full((2, 2), 1.0), np.zeros((2, 2)), np.zeros((2, 2))])
    np.testing.assert_allclose(rgb_to_gray(rgb), 0.299)


def test_zero_weights_leave_bias_planes(rng):
    w = BeWeights.init(rng, zero=True)
    w.b_fuse.data = np.arange(8.0)
    img = Tensor(rng.uniform(0, 1, (1, 3, 12, 12)))
    out = be_forward(img, w).data
    assert out.shape == (1, 8, 12, 12)
    for c in range(8):
        assert np.all(out[0, c] == c)


def test_output_keeps_spatial_size(rng):
    w = BeWeights.init(rng)
    out = be_forward(Tensor(rng.uniform(0, 1, (2, 3, 11, 17))), w)
    assert out.shape == (2, 8, 11, 17)


def test_zero_residual_block_is_identity(rng):
    z = lambda *s: Tensor(np.zeros(s))
    blk = ResBlock(z(4, 4, 3, 3), z(4), z(4, 4, 3, 3), z(4))
    x = rng.normal(size=(1, 4, 5, 5))
    np.testing.assert_array_equal(blk(Tensor(x)).data, x)


def test_edge_plane_is_the_canny_ring():
    img = np.repeat(square_image(32, 10, 22)[None], 3, axis=0)
    edges = canny_planes(img[None])
    np.testing.assert_array_equal(edges[0, 0], canny_rgb(img))
    # with only the edge channel feeding the fuse conv, f_b is nonzero exactly on the ring
    w = BeWeights.init(np.random.default_rng(0), zero=True)
    w.w_fuse.data[:, -1] = 1.0
    out = be_forward(Tensor(img[None]), w, edges).data
    np.testing.assert_array_equal(out[0, 0] != 0, edges[0, 0] != 0)


def test_be_gradcheck(rng):
    img = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
    img.data[:, :, 4:12, 4:12] += 0.8
    edges = canny_planes(img.data)
    w = BeWeights.init(rng)
    r = Tensor(rng.normal(size=(1, 8, 16, 16)))
    ps = list(w.params().values())
    assert grad_check(lambda *p: mean(mul(be_forward(img, w, edges), r)), ps, eps=1e-4, max_entries=6,
                      rng=np.random.default_rng(0)) < 1e-6
