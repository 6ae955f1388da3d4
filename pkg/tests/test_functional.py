import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qres import functional as F
from qres.errors import ShapeError
from qres.tensor import Tensor


def naive_conv(x, w, b, stride, padding, groups):
    """Six nested loops over (n, o, i, j, c, kh/kw), the textbook definition."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, g * cg + ci, i * stride + u, j * stride + v] * w[oc, ci, u, v]
                    out[bi, oc, i, j] = acc
    return out


def test_conv_sum_of_ones():
    out = F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(F.conv2d(Tensor(x), Tensor(w)).data, x)


@pytest.mark.parametrize("stride,padding,groups,cout", [
    (1, 0, 1, 4), (1, 1, 1, 4), (2, 1, 1, 2), (1, 1, 3, 3), (2, 0, 3, 6), (3, 2, 1, 1),
])
def test_conv_matches_naive_loops(rng, stride, padding, groups, cout):
    x = rng.normal(size=(1, 3, 8, 8))
    w = rng.normal(size=(cout, 3 // groups, 3, 3))
    b = rng.normal(size=cout)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, groups).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, padding, groups), atol=1e-12, rtol=0)


def test_depthwise_equals_per_channel_correlation(rng):
    x = rng.normal(size=(2, 4, 6, 7))
    w = rng.normal(size=(4, 1, 3, 3))
    got = F.conv2d(Tensor(x), Tensor(w), padding=1, groups=4).data
    for c in range(4):
        ref = naive_conv(x[:, c:c + 1], w[c:c + 1], None, 1, 1, 1)
        np.testing.assert_allclose(got[:, c:c + 1], ref, atol=1e-12, rtol=0)


def test_conv_output_size_law(rng):
    out = F.conv2d(Tensor(rng.normal(size=(1, 2, 11, 9))), Tensor(rng.normal(size=(3, 2, 3, 3))),
                   stride=2, padding=1)
    assert out.shape == (1, 3, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


@pytest.mark.parametrize("x_shape,w_shape,groups", [
    ((1, 3, 4, 4), (2, 2, 3, 3), 1),
    ((1, 4, 4, 4), (4, 4, 3, 3), 2),
    ((1, 3, 4, 4), (3, 1, 3, 3), 2),
    ((1, 3, 2, 2), (3, 3, 3, 3), 1),
])
def test_conv_shape_errors(x_shape, w_shape, groups):
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.zeros(x_shape)), Tensor(np.zeros(w_shape)), groups=groups)


def test_pixel_shuffle_shape_law():
    assert F.pixel_shuffle(Tensor(np.zeros((1, 4, 2, 2))), 2).shape == (1, 1, 4, 4)
    with pytest.raises(ShapeError):
        F.pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2))), 2)


@pytest.mark.parametrize("r", [2, 3, 4])
def test_pixel_shuffle_index_oracle(rng, r):
    n, c, h, w = 2, 2 * r * r, 3, 2
    x = rng.normal(size=(n, c, h, w))
    out = F.pixel_shuffle(Tensor(x), r).data
    for b in range(n):
        for ch in range(c // (r * r)):
            for i in range(h * r):
                for j in range(w * r):
                    src = ch * r * r + (i % r) * r + (j % r)
                    assert out[b, ch, i, j] == x[b, src, i // r, j // r]


@settings(max_examples=60, deadline=None)
@given(r=st.sampled_from([2, 3, 4]), n=st.integers(1, 2), c=st.integers(1, 3),
       h=st.integers(1, 3), w=st.integers(1, 3), seed=st.integers(0, 2 ** 16))
def test_shuffle_unshuffle_inverse(r, n, c, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(n, c, h * r, w * r))
    back = F.pixel_shuffle(F.pixel_unshuffle(Tensor(x), r), r).data
    assert np.array_equal(back, x)
    y = np.random.default_rng(seed).normal(size=(n, c * r * r, h, w))
    assert np.array_equal(F.pixel_unshuffle(F.pixel_shuffle(Tensor(y), r), r).data, y)


def test_layer_norm_constant_input_is_zero():
    x = Tensor(np.full((1, 3, 2, 2), 7.0))
    out = F.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 3, 2, 2)))


def test_layer_norm_two_channel_symmetry():
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    out = F.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data.ravel()
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-10)


def test_layer_norm_statistics(rng):
    x = Tensor(rng.normal(3.0, 5.0, size=(2, 8, 4, 4)))
    eps = 1e-6
    out = F.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps).data
    assert np.abs(out.mean(axis=1)).max() < 1e-10
    var = x.data.var(axis=1)
    np.testing.assert_allclose(out.var(axis=1), var / (var + eps), atol=1e-12)


def test_linear_identity(rng):
    x = rng.normal(size=(4, 3))
    out = F.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_avg_pool_edge_pads_odd_sides():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = F.avg_pool2(Tensor(x)).data[0, 0]
    np.testing.assert_allclose(out, [[2.0, 3.5], [6.5, 8.0]])
