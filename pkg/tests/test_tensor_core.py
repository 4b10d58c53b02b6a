import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgvos import tensor_core as tc
from mgvos.gradcheck import PRIMITIVE_CHECKS


def conv_loop(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for y in range(ho):
                for x_ in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[b, ic, y * stride + u, x_ * stride + v] * w[oc, ic, u, v]
                    out[b, oc, y, x_] = acc
    return out


def test_conv_all_ones_center_is_nine():
    out = tc.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), padding=1)
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == 4


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 5))
    np.testing.assert_array_equal(tc.conv2d(x, np.ones((1, 1, 1, 1))), x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    np.testing.assert_allclose(tc.conv2d(x, w, stride, pad), conv_loop(x, w, stride, pad), atol=1e-6)


def test_conv_bias_and_output_size():
    x = np.zeros((1, 2, 7, 6))
    out = tc.conv2d(x, np.zeros((4, 2, 3, 3)), stride=2, padding=1, bias=np.arange(4.0))
    assert out.shape == (1, 4, 4, 3)
    np.testing.assert_array_equal(out[0, :, 0, 0], np.arange(4.0))


def test_conv_errors():
    with pytest.raises(tc.ShapeError):
        tc.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(tc.ShapeError):
        tc.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)))
    with pytest.raises(tc.NonFiniteError):
        tc.conv2d(np.full((1, 1, 3, 3), np.inf), np.ones((1, 1, 1, 1)))


def test_conv_backward_zero_and_scalar():
    x = np.random.default_rng(1).standard_normal((1, 2, 4, 4))
    w = np.random.default_rng(2).standard_normal((3, 2, 3, 3))
    gx, gw = tc.conv2d_backward(x, w, np.zeros((1, 3, 4, 4)), padding=1)
    assert not gx.any() and not gw.any()
    gx, gw = tc.conv2d_backward(np.array([[[[2.0]]]]), np.array([[[[3.0]]]]), np.array([[[[5.0]]]]))
    assert gw.item() == 10.0 and gx.item() == 15.0
    with pytest.raises(tc.ShapeError):
        tc.conv2d_backward(x, w, np.zeros((1, 3, 3, 3)), padding=1)


def test_pointwise_examples():
    up = tc.upsample2x(np.full((1, 2, 3, 4), 1.5))
    assert up.shape == (1, 2, 6, 8)
    np.testing.assert_allclose(up, 1.5)
    a, b = np.zeros((2, 2, 3, 3)), np.ones((2, 3, 3, 3))
    cat = tc.concat_channels(a, b)
    assert cat.shape == (2, 5, 3, 3)
    assert not cat[:, :2].any() and cat[:, 2:].all()
    with pytest.raises(tc.ShapeError):
        tc.concat_channels(a, np.ones((2, 3, 3, 4)))
    g = np.random.default_rng(3).standard_normal((1, 1, 2, 2))
    np.testing.assert_allclose(tc.sigmoid_backward(tc.sigmoid(np.zeros_like(g)), g), 0.25 * g)
    with pytest.raises(tc.ShapeError):
        tc.elementwise_mul(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 3)))


def bilinear_loop(x):
    """align_corners=False bilinear 2x with edge clamping, one value at a time."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for oy in range(2 * h):
        sy = min(max((oy + 0.5) / 2 - 0.5, 0), h - 1)
        y0 = int(np.floor(sy))
        y1, fy = min(y0 + 1, h - 1), sy - y0
        for ox in range(2 * w):
            sx = min(max((ox + 0.5) / 2 - 0.5, 0), w - 1)
            x0 = int(np.floor(sx))
            x1, fx = min(x0 + 1, w - 1), sx - x0
            out[:, :, oy, ox] = (
                (1 - fy) * (1 - fx) * x[:, :, y0, x0] + (1 - fy) * fx * x[:, :, y0, x1]
                + fy * (1 - fx) * x[:, :, y1, x0] + fy * fx * x[:, :, y1, x1]
            )
    return out


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_upsample_matches_interpolation_oracle(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, 2, h, w))
    np.testing.assert_allclose(tc.upsample2x(x), bilinear_loop(x), atol=1e-12)


def test_relu_and_mul_oracles():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 4, 8, 8))
    y = rng.standard_normal((2, 4, 8, 8))
    np.testing.assert_array_equal(tc.relu(x), np.where(x > 0, x, 0))
    np.testing.assert_array_equal(tc.elementwise_mul(x, y), x * y)
    np.testing.assert_allclose(tc.sigmoid(x), 1 / (1 + np.exp(-x)), atol=1e-12)


def test_unfold_examples():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    y = tc.unfold(x, 3)
    assert y.shape == (3, 3, 1, 1, 2, 2)
    np.testing.assert_array_equal(y[:, :, 0, 0, 0, 0].ravel(), [0, 0, 0, 0, 1, 2, 0, 3, 4])
    z = np.random.default_rng(5).standard_normal((2, 3, 4, 5))
    np.testing.assert_array_equal(tc.unfold(z, 1)[0, 0], z.transpose(1, 0, 2, 3))
    with pytest.raises(tc.ShapeError):
        tc.unfold(z, 2)


@given(st.sampled_from([1, 3, 5]), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_unfold_index_oracle_and_adjoint(k, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, h, w))
    y = tc.unfold(x, k)
    r = (k - 1) // 2
    for u in range(k):
        for v in range(k):
            for yy in range(h):
                for xx in range(w):
                    sy, sx = yy + u - r, xx + v - r
                    want = x[:, :, sy, sx] if 0 <= sy < h and 0 <= sx < w else 0.0
                    np.testing.assert_array_equal(y[u, v, :, :, yy, xx], np.broadcast_to(want, (2, 3)).T)
    g = rng.standard_normal(y.shape)
    np.testing.assert_allclose((y * g).sum(), (x * tc.fold(g)).sum(), rtol=1e-10)


def test_softmax_examples():
    np.testing.assert_allclose(tc.softmax_over_leading_window(np.full((3, 3, 1, 2, 2), 4.2)), 1 / 9)
    np.testing.assert_array_equal(tc.softmax_over_leading_window(np.random.default_rng(0).standard_normal((1, 1, 2, 3, 3))), 1.0)
    # a square window cannot hold exactly two slots; one slot at ln 3 among
    # eight at 0 gives the same 1:3 ratio, i.e. 3/11 vs 1/11
    s = np.zeros((3, 3, 1, 1, 1))
    s[0, 1] = np.log(3.0)
    w = tc.softmax_over_leading_window(s).ravel()
    np.testing.assert_allclose(w[1], 3 / 11)
    np.testing.assert_allclose(np.delete(w, 1), 1 / 11)


@given(st.sampled_from([1, 3, 5]), st.floats(-50, 50), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_softmax_properties(k, shift, seed):
    s = np.random.default_rng(seed).standard_normal((k, k, 2, 3, 3)) * 10
    w = tc.softmax_over_leading_window(s)
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=(0, 1)), 1.0, atol=1e-6)
    np.testing.assert_allclose(tc.softmax_over_leading_window(s + shift), w, atol=1e-9)


def test_softmax_stable_for_large_scores():
    s = np.zeros((3, 3, 1, 1, 1))
    s[1, 1] = 1000.0
    w = tc.softmax_over_leading_window(s)
    assert np.isfinite(w).all()
    assert w[1, 1].item() == pytest.approx(1.0) and w.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("name", [n for n in PRIMITIVE_CHECKS if n not in ("motion_guidance", "bce")])
@pytest.mark.parametrize("seed", range(20))
def test_primitive_backward_matches_finite_differences(name, seed):
    res = PRIMITIVE_CHECKS[name](np.random.default_rng(seed))
    assert res.passed, f"{res.name}: {res.max_rel_err:.2e}"
