"""Dense NCHW primitives with explicit forward/backward pairs.

Every function takes and returns plain ``numpy`` arrays laid out as
(batch, channels, height, width). There is no autograd graph: callers keep
whatever forward values a backward needs and pass them back in.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x, dtype=None) -> np.ndarray:
    """Coerce to a rank-4 float array (float32 unless ``dtype`` is given)."""
    arr = np.asarray(x, dtype=dtype or DEFAULT_DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")
    return arr


def _require_rank4(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (N, C, H, W), got shape {x.shape}")


def _require_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv_args(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> tuple[int, int]:
    _require_rank4(x, "conv2d input")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weights: expected (C_out, C_in, kh, kw), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: weights expect {w.shape[1]} input channels, input has {x.shape[1]}"
        )
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel spatial size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape[2:]} too small for kernel {kh}x{kw}")
    return ho, wo


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (N, C, Ho, Wo, kh, kw) strided view; tensordot materializes it once
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return cols[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0, bias=None) -> np.ndarray:
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw)."""
    ho, wo = _check_conv_args(x, w, stride, padding)
    kh, kw = w.shape[2:]
    cols = _im2col(x, kh, kw, stride, padding, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return check_finite(out, "conv2d")


def conv2d_backward(x, w, grad_out, stride: int = 1, padding: int = 0):
    """Return ``(grad_input, grad_weights)`` for :func:`conv2d`.

    The bias gradient is simply ``grad_out.sum(axis=(0, 2, 3))``.
    """
    ho, wo = _check_conv_args(x, w, stride, padding)
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    expected = (n, w.shape[0], ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d_backward: grad_out shape {grad_out.shape}, expected {expected}")
    cols = _im2col(x, kh, kw, stride, padding, ho, wo)
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    grad_cols = np.tensordot(grad_out, w, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    grad_cols = grad_cols.transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                grad_cols[..., i, j]
            )
    grad_x = gxp[:, :, padding : padding + h, padding : padding + wd]
    return (
        check_finite(np.ascontiguousarray(grad_x), "conv2d_backward"),
        check_finite(grad_w.astype(w.dtype, copy=False), "conv2d_backward"),
    )


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _require_same_shape(x, grad_out, "relu_backward")
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward of sigmoid given its *output* ``y``."""
    _require_same_shape(y, grad_out, "sigmoid_backward")
    return grad_out * y * (1 - y)


def elementwise_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require_same_shape(a, b, "elementwise_mul")
    return check_finite(a * b, "elementwise_mul")


def elementwise_mul_backward(a, b, grad_out):
    _require_same_shape(a, grad_out, "elementwise_mul_backward")
    return grad_out * b, grad_out * a


def concat_channels(*xs: np.ndarray) -> np.ndarray:
    if not xs:
        raise ShapeError("concat_channels: nothing to concatenate")
    for x in xs:
        _require_rank4(x, "concat_channels operand")
    ref = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: N/H/W disagree, {ref} vs {x.shape}")
    return np.concatenate(xs, axis=1)


def concat_channels_backward(channel_counts, grad_out):
    if sum(channel_counts) != grad_out.shape[1]:
        raise ShapeError(
            f"concat_channels_backward: counts {channel_counts} do not sum to {grad_out.shape[1]}"
        )
    splits = np.cumsum(channel_counts)[:-1]
    return np.split(grad_out, splits, axis=1)


# ---------------------------------------------------------------------------
# bilinear 2x upsampling (align_corners=False, edge-clamped)
# ---------------------------------------------------------------------------

def _up_axis(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    out[..., 0::2] = 0.75 * x + 0.25 * prev
    out[..., 1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    even, odd = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (even + odd)
    # even[i] took 0.25*x[i-1] (x[0] at the left edge), odd[i] took 0.25*x[i+1]
    out[..., :-1] += 0.25 * even[..., 1:]
    out[..., :1] += 0.25 * even[..., :1]
    out[..., 1:] += 0.25 * odd[..., :-1]
    out[..., -1:] += 0.25 * odd[..., -1:]
    return np.moveaxis(out, -1, axis)


def upsample2x(x: np.ndarray) -> np.ndarray:
    _require_rank4(x, "upsample2x")
    return _up_axis(_up_axis(x, 2), 3)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    _require_rank4(grad_out, "upsample2x_backward")
    if grad_out.shape[2] % 2 or grad_out.shape[3] % 2:
        raise ShapeError(f"upsample2x_backward: odd spatial shape {grad_out.shape[2:]}")
    return _up_axis_adjoint(_up_axis_adjoint(grad_out, 3), 2)


# ---------------------------------------------------------------------------
# windowed rearrangement and window softmax
# ---------------------------------------------------------------------------

def _check_window(k: int) -> int:
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"window size K must be a positive odd integer, got {k}")
    return (k - 1) // 2


def unfold(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded sliding windows, returned as a (K, K, C, N, H, W) array.

    ``out[u, v, c, n, y, x] == x[n, c, y + u - r, x + v - r]`` with r = (K-1)/2,
    zero where the index falls outside the map.
    """
    r = _check_window(k)
    _require_rank4(x, "unfold")
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.empty((k, k, c, n, h, w), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            out[u, v] = xp[:, :, u : u + h, v : v + w].transpose(1, 0, 2, 3)
    return out


def fold(y: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`unfold`: scatter-add windows back onto an (N, C, H, W) map."""
    if y.ndim != 6 or y.shape[0] != y.shape[1]:
        raise ShapeError(f"fold: expected (K, K, C, N, H, W), got {y.shape}")
    k = y.shape[0]
    r = _check_window(k)
    _, _, c, n, h, w = y.shape
    xp = np.zeros((n, c, h + 2 * r, w + 2 * r), dtype=y.dtype)
    for u in range(k):
        for v in range(k):
            xp[:, :, u : u + h, v : v + w] += y[u, v].transpose(1, 0, 2, 3)
    return xp[:, :, r : r + h, r : r + w]


def softmax_over_leading_window(scores: np.ndarray) -> np.ndarray:
    """Softmax over the two leading (K, K) axes of a (K, K, N, H, W) array."""
    if scores.ndim != 5 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"softmax_over_leading_window: expected (K, K, N, H, W), got {scores.shape}")
    check_finite(scores, "softmax input")
    z = scores - scores.max(axis=(0, 1), keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=(0, 1), keepdims=True)


def softmax_over_leading_window_backward(weights: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _require_same_shape(weights, grad_out, "softmax backward")
    inner = (weights * grad_out).sum(axis=(0, 1), keepdims=True)
    return weights * (grad_out - inner)
