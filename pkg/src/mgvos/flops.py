"""Analytical multiply-accumulate counts for co-attention and motion guidance.

Rearrangements (im2col, repeat, transpose, reshape) cost nothing. Softmax is
not a MAC; its elementary ops (exp, add, divide ~ 3 per element) are kept in
``normalization_ops`` and excluded from ``total_macs``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .attention import (
    CoAttentionConfig,
    MotionGuidanceConfig,
    co_attention_naive,
    motion_guidance_naive,
)

# Published reference counts, (co-attention, motion guidance) FLOPs as printed.
REFERENCE_FLOPS = {"64x64x16": (10.0e6, 2.3e6), "64x64x32": (153.1e6, 9.0e6)}

# Reading of the reference configurations under which the co-attention count is reproduced exactly
# by this MAC model: C=64, d=4 on 16x16 and 32x32 grids.
REFERENCE_READING = {"64x64x16": dict(h=16, w=16, c=64, d=4), "64x64x32": dict(h=32, w=32, c=64, d=4)}


@dataclass(frozen=True)
class FlopsBreakdown:
    compression: int
    similarity: int
    weighted_sum: int
    normalization_ops: int

    @property
    def total_macs(self) -> int:
        return self.compression + self.similarity + self.weighted_sum

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def scaled(self, factor: int) -> "FlopsBreakdown":
        return FlopsBreakdown(*(factor * v for v in asdict(self).values()))

    def as_dict(self) -> dict:
        out = asdict(self)
        out["total_macs"] = self.total_macs
        out["total_flops"] = self.total_flops
        return out


def _check_dims(h, w, c, d):
    for name, v in (("H", h), ("W", w), ("C", c), ("d", d)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    if c % d:
        raise ValueError(f"C={c} is not divisible by d={d}")


def flops_co_attention(h: int, w: int, c: int, d: int, n: int = 1) -> FlopsBreakdown:
    _check_dims(h, w, c, d)
    hw = h * w
    cd = c // d
    return FlopsBreakdown(
        compression=2 * hw * c * cd,
        similarity=hw * hw * cd,
        weighted_sum=2 * hw * hw * c,
        # one row softmax for U_a and one column softmax for U_b
        normalization_ops=2 * 3 * hw * hw,
    ).scaled(n)


def flops_motion_guidance(h: int, w: int, c: int, d: int, k: int, cascade: int = 1, n: int = 1) -> FlopsBreakdown:
    _check_dims(h, w, c, d)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"K must be a positive odd integer, got {k}")
    if cascade < 1:
        raise ValueError(f"cascade must be >= 1, got {cascade}")
    hw = h * w
    cd = c // d
    kk = k * k
    stage = FlopsBreakdown(
        compression=hw * c * cd,
        similarity=hw * kk * cd,
        weighted_sum=hw * kk * c,
        normalization_ops=3 * hw * kk,
    )
    return stage.scaled(cascade * n)


class MacCounter:
    """Local accumulator handed to the naive operators."""

    def __init__(self):
        self.counts = Counter()

    def add(self, category: str, n: int) -> None:
        self.counts[category] += int(n)

    def breakdown(self) -> FlopsBreakdown:
        return FlopsBreakdown(
            compression=self.counts["compression"],
            similarity=self.counts["similarity"],
            weighted_sum=self.counts["weighted_sum"],
            normalization_ops=self.counts["normalization"],
        )


def instrumented_count(op) -> FlopsBreakdown:
    """Run ``op(counter)`` and return what the counter saw.

    ``op`` is a closure that executes one of the naive operators with the
    given counter, e.g. ``lambda ctr: motion_guidance_naive(a, m, cfg, counter=ctr)``.
    """
    counter = MacCounter()
    op(counter)
    return counter.breakdown()


def count_co_attention(h, w, c, d, n=1, seed=0) -> FlopsBreakdown:
    """Instrumented count of a naive co-attention run on random data."""
    rng = np.random.default_rng(seed)
    v_a = rng.standard_normal((n, c, h, w))
    v_b = rng.standard_normal((n, c, h, w))
    cfg = CoAttentionConfig.random(c, d, rng=rng)
    return instrumented_count(lambda ctr: co_attention_naive(v_a, v_b, cfg, counter=ctr))


def count_motion_guidance(h, w, c, d, k, cascade=1, n=1, seed=0) -> FlopsBreakdown:
    """Instrumented count of a naive (cascaded) motion guidance run on random data."""
    rng = np.random.default_rng(seed)
    v_a = rng.standard_normal((n, c, h, w))
    v_m = rng.standard_normal((n, c, h, w))
    cfg = MotionGuidanceConfig.random(c, k=k, d=d, cascade=cascade, rng=rng)

    def run(ctr):
        out = v_a
        for stage in range(cascade):
            out = motion_guidance_naive(out, v_m, cfg, stage=stage, counter=ctr)
        return out

    return instrumented_count(run)


def reference_report(d: int = 2, k: int = 3, cascade: int = 1) -> list[dict]:
    """Rows for both reference configurations, read literally and as recovered."""
    rows = []
    for label, (reported_co, reported_mg) in REFERENCE_FLOPS.items():
        h, w, c = (int(v) for v in label.split("x"))
        co = flops_co_attention(h, w, c, d)
        mg = flops_motion_guidance(h, w, c, d, k, cascade)
        rows.append(
            dict(
                config=label, reading="HxWxC", h=h, w=w, c=c, d=d, k=k, cascade=cascade,
                co_macs=co.total_macs, mg_macs=mg.total_macs,
                ratio=co.total_macs / mg.total_macs,
                reported_co=reported_co, reported_mg=reported_mg, reported_ratio=reported_co / reported_mg,
            )
        )
        rec = REFERENCE_READING[label]
        co = flops_co_attention(**rec)
        mg = flops_motion_guidance(**rec, k=k, cascade=cascade)
        rows.append(
            dict(
                config=label, reading="C=64,d=4,HxW", **rec, k=k, cascade=cascade,
                co_macs=co.total_macs, mg_macs=mg.total_macs,
                ratio=co.total_macs / mg.total_macs,
                reported_co=reported_co, reported_mg=reported_mg, reported_ratio=reported_co / reported_mg,
            )
        )
    return rows
