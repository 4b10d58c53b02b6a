"""Segmentation and saliency metrics: R (IoU), contour F, R&F, MAE and F-beta."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage


def _as_mask(m, name="mask") -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected an H x W array, got shape {m.shape}")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name}: values must be 0 or 1")
        m = m.astype(bool)
    return m


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def region_similarity(mask, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    mask, gt = _as_mask(mask), _as_mask(gt, "gt")
    _same_shape(mask, gt)
    union = np.logical_or(mask, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mask, gt).sum() / union)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour that is background.

    Pixels outside the image count as background.
    """
    mask = _as_mask(mask)
    cross = ndimage.generate_binary_structure(2, 1)
    eroded = ndimage.binary_erosion(mask, structure=cross, border_value=0)
    return mask & ~eroded


def default_tolerance(shape) -> int:
    return math.ceil(0.0075 * math.hypot(*shape))


def contour_f(mask, gt, tolerance_px: int | None = None) -> float:
    """Boundary F-measure with Chebyshev matching tolerance (pixels)."""
    mask, gt = _as_mask(mask), _as_mask(gt, "gt")
    _same_shape(mask, gt)
    if tolerance_px is None:
        tolerance_px = default_tolerance(mask.shape)
    bm, bg = boundary(mask), boundary(gt)
    if not bm.any() and not bg.any():
        return 1.0
    if not bm.any() or not bg.any():
        return 0.0
    square = np.ones((2 * tolerance_px + 1,) * 2, dtype=bool)
    near_gt = ndimage.binary_dilation(bg, structure=square)
    near_m = ndimage.binary_dilation(bm, structure=square)
    precision = (bm & near_gt).sum() / bm.sum()
    recall = (bg & near_m).sum() / bg.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def j_and_f(r: float, f: float) -> float:
    return (r + f) / 2


def mae(saliency, gt) -> float:
    s = np.asarray(saliency, dtype=np.float64)
    gt = _as_mask(gt, "gt")
    _same_shape(s, gt)
    return float(np.abs(s - gt).mean())


def _f_beta_binary(pred: np.ndarray, gt: np.ndarray, beta2: float) -> float:
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return f_beta_from_pr(precision, recall, beta2)


def f_beta_from_pr(precision: float, recall: float, beta2: float = 0.3) -> float:
    denom = beta2 * precision + recall
    if denom == 0:
        return 0.0
    return (1 + beta2) * precision * recall / denom


def f_beta(saliency, gt, beta2: float = 0.3, threshold: float | str = 0.5) -> float:
    """F-beta of a saliency map binarized at ``threshold``.

    ``threshold="sweep"`` tries the 255 levels k/256 (k = 1..255) and
    returns the best score.
    """
    s = np.asarray(saliency, dtype=np.float64)
    gt = _as_mask(gt, "gt")
    _same_shape(s, gt)
    if threshold == "sweep":
        return max(_f_beta_binary(s >= t, gt, beta2) for t in np.arange(1, 256) / 256)
    return _f_beta_binary(s >= threshold, gt, beta2)


@dataclass
class FrameMetrics:
    R: float
    F: float
    MAE: float
    Fbeta: float

    @property
    def RF(self) -> float:
        return j_and_f(self.R, self.F)


def frame_metrics(prob, gt, threshold=0.5, tolerance_px=None, beta2=0.3) -> FrameMetrics:
    pred = np.asarray(prob) >= threshold
    return FrameMetrics(
        R=region_similarity(pred, gt),
        F=contour_f(pred, gt, tolerance_px),
        MAE=mae(prob, gt),
        Fbeta=f_beta(prob, gt, beta2, threshold),
    )


@dataclass
class SequenceRecord:
    name: str
    R: float
    F: float
    RF: float
    MAE: float
    Fbeta: float


@dataclass
class MetricsReport:
    sequences: list[SequenceRecord] = field(default_factory=list)

    def add_sequence(self, name: str, frames: list[FrameMetrics]) -> SequenceRecord:
        if not frames:
            raise ValueError(f"sequence {name!r} has no frames")
        r = float(np.mean([f.R for f in frames]))
        f = float(np.mean([f.F for f in frames]))
        rec = SequenceRecord(
            name=name, R=r, F=f, RF=j_and_f(r, f),
            MAE=float(np.mean([x.MAE for x in frames])),
            Fbeta=float(np.mean([x.Fbeta for x in frames])),
        )
        self.sequences.append(rec)
        return rec

    def mean(self) -> dict:
        if not self.sequences:
            return dict(R=float("nan"), F=float("nan"), RF=float("nan"), MAE=float("nan"), Fbeta=float("nan"))
        keys = ("R", "F", "MAE", "Fbeta")
        out = {k: float(np.mean([getattr(s, k) for s in self.sequences])) for k in keys}
        out["RF"] = j_and_f(out["R"], out["F"])
        return out

    def to_dict(self) -> dict:
        return {"sequences": [asdict(s) for s in self.sequences], "mean": self.mean()}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls([SequenceRecord(**s) for s in data["sequences"]])
