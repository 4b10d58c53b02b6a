"""Motion-guided local attention and the global co-attention it replaces.

The motion guidance operator re-weights appearance features with softmax
weights computed from motion features inside a K x K window::

    m        = conv1x1(V_m)                       # C -> C/d channels
    S[p, q]  = <m(p), m(q)>      for q in window(p)
    A[p, .]  = softmax_q S[p, .]
    U_a(p)   = sum_q A[p, q] * V_a(q)

Windows are zero-padded; out-of-map slots still take part in the softmax
with a score of 0 and contribute a zero appearance vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    ShapeError,
    check_finite,
    conv2d,
    conv2d_backward,
    fold,
    softmax_over_leading_window,
    softmax_over_leading_window_backward,
    unfold,
)

SCORE_MODES = ("softmax", "unnormalized")


@dataclass(frozen=True)
class MotionGuidanceConfig:
    """Hyperparameters plus one (C/d, C, 1, 1) compression kernel per cascade stage."""

    k: int = 3
    d: int = 2
    cascade: int = 1
    compress_weights: tuple = field(default=(), repr=False, compare=False)
    score_mode: str = "softmax"

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ShapeError(f"window size K must be odd, got {self.k}")
        if self.d < 1:
            raise ValueError(f"compression divisor d must be >= 1, got {self.d}")
        if self.cascade < 1:
            raise ValueError(f"cascade must be >= 1, got {self.cascade}")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")
        if self.compress_weights and len(self.compress_weights) != self.cascade:
            raise ValueError(
                f"need one compression kernel per cascade stage ({self.cascade}), "
                f"got {len(self.compress_weights)}"
            )

    @classmethod
    def random(cls, channels: int, k: int = 3, d: int = 2, cascade: int = 1, rng=None, **kw):
        rng = np.random.default_rng(rng)
        if channels % d:
            raise ValueError(f"C={channels} is not divisible by d={d}")
        bound = 1.0 / np.sqrt(channels)
        weights = tuple(
            rng.uniform(-bound, bound, size=(channels // d, channels, 1, 1)) for _ in range(cascade)
        )
        return cls(k=k, d=d, cascade=cascade, compress_weights=weights, **kw)

    def stage_weights(self, stage: int, channels: int) -> np.ndarray:
        if not self.compress_weights:
            raise ValueError("MotionGuidanceConfig has no compression kernels")
        if channels % self.d:
            raise ShapeError(f"C={channels} is not divisible by d={self.d}")
        w = self.compress_weights[stage]
        expected = (channels // self.d, channels, 1, 1)
        if w.shape != expected:
            raise ShapeError(f"compression kernel shape {w.shape}, expected {expected}")
        return w


@dataclass(frozen=True)
class CoAttentionConfig:
    d: int
    weights_a: np.ndarray = field(repr=False, compare=False)
    weights_b: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def random(cls, channels: int, d: int = 2, rng=None):
        rng = np.random.default_rng(rng)
        if channels % d:
            raise ValueError(f"C={channels} is not divisible by d={d}")
        bound = 1.0 / np.sqrt(channels)
        shape = (channels // d, channels, 1, 1)
        return cls(d, rng.uniform(-bound, bound, shape), rng.uniform(-bound, bound, shape))


class _NoCount:
    def add(self, category, n):
        pass


def _check_pair(v_a, v_m, what):
    if v_a.ndim != 4 or v_a.shape != v_m.shape:
        raise ShapeError(f"{what}: inputs must share an (N, C, H, W) shape, got {v_a.shape} and {v_m.shape}")


# ---------------------------------------------------------------------------
# motion guidance: naive loop oracle
# ---------------------------------------------------------------------------

def motion_guidance_naive(v_a, v_m, cfg: MotionGuidanceConfig, stage: int = 0, counter=None):
    """Per-position loop implementation. Slow; used as the oracle.

    ``counter`` (anything with ``add(category, n)``) is told about every
    multiply-accumulate and softmax elementary op as it executes.
    """
    _check_pair(v_a, v_m, "motion_guidance_naive")
    counter = counter or _NoCount()
    n, c, h, w = v_a.shape
    wc = cfg.stage_weights(stage, c)[:, :, 0, 0]
    cd = wc.shape[0]
    k, r = cfg.k, (cfg.k - 1) // 2

    m = np.zeros((n, cd, h + 2 * r, w + 2 * r), dtype=v_a.dtype)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                m[b, :, y + r, x + r] = wc @ v_m[b, :, y, x]
                counter.add("compression", wc.size)
    ap = np.pad(v_a, ((0, 0), (0, 0), (r, r), (r, r)))

    out = np.empty_like(v_a)
    scores = np.empty(k * k, dtype=v_a.dtype)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                center = m[b, :, y + r, x + r]
                for u in range(k):
                    for v in range(k):
                        scores[u * k + v] = np.dot(center, m[b, :, y + u, x + v])
                        counter.add("similarity", cd)
                if cfg.score_mode == "softmax":
                    e = np.exp(scores - scores.max())
                    weights = e / e.sum()
                    counter.add("normalization", 3 * scores.size)
                else:
                    weights = scores
                acc = np.zeros(c, dtype=v_a.dtype)
                for u in range(k):
                    for v in range(k):
                        acc += weights[u * k + v] * ap[b, :, y + u, x + v]
                        counter.add("weighted_sum", c)
                out[b, :, y, x] = acc
    return check_finite(out, "motion_guidance_naive")


# ---------------------------------------------------------------------------
# motion guidance: unfolded fast path
# ---------------------------------------------------------------------------

def _mg_forward(v_a, v_m, wc, k, score_mode):
    m = conv2d(v_m, wc)
    m_unf = unfold(m, k)  # (K, K, C/d, N, H, W)
    center = m.transpose(1, 0, 2, 3)[None, None]  # repeated K*K times by broadcasting
    scores = np.einsum("uvcnhw,uvcnhw->uvnhw", m_unf, np.broadcast_to(center, m_unf.shape))
    if score_mode == "softmax":
        weights = softmax_over_leading_window(scores)
    else:
        weights = scores
    a_unf = unfold(v_a, k)  # (K, K, C, N, H, W)
    out = np.einsum("uvnhw,uvcnhw->nchw", weights, a_unf)
    cache = (v_m, wc, m, m_unf, weights, a_unf, score_mode)
    return check_finite(np.ascontiguousarray(out), "motion_guidance"), cache


def _mg_backward(cache, grad_u):
    v_m, wc, m, m_unf, weights, a_unf, score_mode = cache
    g = grad_u.transpose(1, 0, 2, 3)  # (C, N, H, W)
    grad_a = fold(weights[:, :, None] * g[None, None])
    grad_weights = np.einsum("uvcnhw,cnhw->uvnhw", a_unf, g)
    if score_mode == "softmax":
        grad_scores = softmax_over_leading_window_backward(weights, grad_weights)
    else:
        grad_scores = grad_weights
    # scores = <m_unf, center>: both factors are functions of m
    grad_m = fold(grad_scores[:, :, None] * m.transpose(1, 0, 2, 3)[None, None])
    grad_m += np.einsum("uvnhw,uvcnhw->cnhw", grad_scores, m_unf).transpose(1, 0, 2, 3)
    grad_vm, grad_wc = conv2d_backward(v_m, wc, grad_m)
    return grad_a, grad_vm, grad_wc


def motion_guidance_fast(v_a, v_m, cfg: MotionGuidanceConfig, stage: int = 0, return_weights: bool = False):
    """Vectorized motion guidance via unfold (im2col) and window softmax.

    With ``return_weights`` also returns the (K, K, N, H, W) attention weights.
    """
    _check_pair(v_a, v_m, "motion_guidance_fast")
    wc = cfg.stage_weights(stage, v_a.shape[1])
    out, cache = _mg_forward(v_a, v_m, wc, cfg.k, cfg.score_mode)
    if return_weights:
        return out, cache[4]
    return out


def motion_guidance_backward(v_a, v_m, cfg: MotionGuidanceConfig, grad_u, stage: int = 0):
    """Return ``(grad_V_a, grad_V_m, grad_compress_weights)`` for one stage."""
    _check_pair(v_a, v_m, "motion_guidance_backward")
    if grad_u.shape != v_a.shape:
        raise ShapeError(f"grad_U shape {grad_u.shape} does not match U_a shape {v_a.shape}")
    wc = cfg.stage_weights(stage, v_a.shape[1])
    _, cache = _mg_forward(v_a, v_m, wc, cfg.k, cfg.score_mode)
    return _mg_backward(cache, grad_u)


def motion_guidance_cascade_forward(v_a, v_m, cfg: MotionGuidanceConfig):
    """Cascaded forward that also returns the per-stage caches for backward."""
    _check_pair(v_a, v_m, "motion_guidance_cascade")
    caches = []
    out = v_a
    for stage in range(cfg.cascade):
        wc = cfg.stage_weights(stage, v_a.shape[1])
        out, cache = _mg_forward(out, v_m, wc, cfg.k, cfg.score_mode)
        caches.append(cache)
    return out, caches


def motion_guidance_cascade(v_a, v_m, cfg: MotionGuidanceConfig):
    """Apply the module ``cfg.cascade`` times, feeding each output back as appearance input."""
    return motion_guidance_cascade_forward(v_a, v_m, cfg)[0]


def motion_guidance_cascade_backward(caches, grad_u):
    """Return ``(grad_V_a, grad_V_m, [grad_w per stage])`` from cascade caches."""
    grad_vm = None
    grad_ws = [None] * len(caches)
    g = grad_u
    for stage in reversed(range(len(caches))):
        g, gvm, grad_ws[stage] = _mg_backward(caches[stage], g)
        grad_vm = gvm if grad_vm is None else grad_vm + gvm
    return g, grad_vm, grad_ws


# ---------------------------------------------------------------------------
# global co-attention
# ---------------------------------------------------------------------------

def _row_softmax(s, axis):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def co_attention(v_a, v_b, cfg: CoAttentionConfig):
    """Global co-attention over an HW x HW similarity matrix.

    ``U_a(p) = sum_q softmax_q(S[p, :]) V_b(q)`` and symmetrically
    ``U_b(q) = sum_p softmax_p(S[:, q]) V_a(p)`` with ``S = A^T B``.
    """
    _check_pair(v_a, v_b, "co_attention")
    n, c, h, w = v_a.shape
    if c % cfg.d:
        raise ShapeError(f"C={c} is not divisible by d={cfg.d}")
    a = conv2d(v_a, cfg.weights_a).reshape(n, -1, h * w)
    b = conv2d(v_b, cfg.weights_b).reshape(n, -1, h * w)
    s = np.einsum("ncp,ncq->npq", a, b)
    rows = _row_softmax(s, axis=2)
    cols = _row_softmax(s, axis=1)
    u_a = np.einsum("npq,ncq->ncp", rows, v_b.reshape(n, c, -1)).reshape(n, c, h, w)
    u_b = np.einsum("npq,ncp->ncq", cols, v_a.reshape(n, c, -1)).reshape(n, c, h, w)
    return check_finite(u_a, "co_attention"), check_finite(u_b, "co_attention")


def co_attention_naive(v_a, v_b, cfg: CoAttentionConfig, counter=None):
    """Row-by-row loop version of :func:`co_attention` with MAC instrumentation."""
    _check_pair(v_a, v_b, "co_attention_naive")
    counter = counter or _NoCount()
    n, c, h, w = v_a.shape
    hw = h * w
    wa, wb = cfg.weights_a[:, :, 0, 0], cfg.weights_b[:, :, 0, 0]
    u_a = np.empty((n, c, hw), dtype=v_a.dtype)
    u_b = np.empty((n, c, hw), dtype=v_a.dtype)
    for i in range(n):
        fa = v_a[i].reshape(c, hw)
        fb = v_b[i].reshape(c, hw)
        a = np.empty((wa.shape[0], hw), dtype=v_a.dtype)
        b = np.empty((wb.shape[0], hw), dtype=v_a.dtype)
        for p in range(hw):
            a[:, p] = wa @ fa[:, p]
            b[:, p] = wb @ fb[:, p]
            counter.add("compression", wa.size + wb.size)
        s = np.empty((hw, hw), dtype=v_a.dtype)
        for p in range(hw):
            s[p] = b.T @ a[:, p]
            counter.add("similarity", b.size)
        for p in range(hw):
            e = np.exp(s[p] - s[p].max())
            u_a[i, :, p] = fb @ (e / e.sum())
            counter.add("normalization", 3 * hw)
            counter.add("weighted_sum", fb.size)
        for q in range(hw):
            e = np.exp(s[:, q] - s[:, q].max())
            u_b[i, :, q] = fa @ (e / e.sum())
            counter.add("normalization", 3 * hw)
            counter.add("weighted_sum", fa.size)
    return u_a.reshape(v_a.shape), u_b.reshape(v_a.shape)
