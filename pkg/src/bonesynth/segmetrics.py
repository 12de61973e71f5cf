"""Many-label segmentation metrics and the cross-entropy + soft-Dice loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

from bonesynth.errors import UndefinedMetricError, ValidationError
from bonesynth.volcore import LabelVolume

EPSILON = 1e-5
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassScores:
    dsc_per_class: dict[int, float]
    present_in_gt: frozenset[int]
    detection_ratio: float
    dsc_fg: float


@dataclass(frozen=True)
class SummaryStats:
    median: float
    lower_16: float
    upper_84: float
    n: int

    def to_dict(self) -> dict:
        return {"median": self.median, "lo16": self.lower_16, "hi84": self.upper_84}


@dataclass(frozen=True)
class SoftPrediction:
    """Per-voxel class probabilities, shape ``(nx, ny, nz, num_classes)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 4 or p.shape[3] < 2:
            raise ValidationError(f"probabilities must have shape (nx, ny, nz, C>=2), got {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValidationError("probabilities must be finite and non-negative")
        if np.max(np.abs(p.sum(axis=-1) - 1.0)) > 1e-5:
            raise ValidationError("per-voxel probabilities must sum to 1")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.probs.shape[:3])  # type: ignore[return-value]

    @property
    def num_classes(self) -> int:
        return int(self.probs.shape[3])


class LossTerms(NamedTuple):
    total: float
    xent: float
    dice_term: float


def _check_pair(pred: LabelVolume, gt: LabelVolume):
    if pred.dims != gt.dims:
        raise ValidationError(f"prediction dims {pred.dims} != ground truth dims {gt.dims}")
    if pred.num_classes != gt.num_classes:
        raise ValidationError(f"class counts differ: {pred.num_classes} vs {gt.num_classes}")


def dsc_per_class(pred: LabelVolume, gt: LabelVolume, exclude_background: bool = True) -> dict[int, float]:
    """Dice per class; classes absent from both volumes are omitted."""
    _check_pair(pred, gt)
    n = gt.num_classes
    p, g = pred.data.reshape(-1), gt.data.reshape(-1)
    p_count = np.bincount(p, minlength=n)
    g_count = np.bincount(g, minlength=n)
    inter = np.bincount(g[p == g], minlength=n)
    out = {}
    for c in range(1 if exclude_background else 0, n):
        denom = int(p_count[c] + g_count[c])
        if denom:
            out[c] = 2.0 * int(inter[c]) / denom
    return out


def dsc_foreground(pred: LabelVolume, gt: LabelVolume) -> float:
    """Dice of all non-background voxels, from the background complements."""
    if pred.dims != gt.dims:
        raise ValidationError(f"prediction dims {pred.dims} != ground truth dims {gt.dims}")
    p_fg = pred.data != 0
    g_fg = gt.data != 0
    denom = int(np.count_nonzero(p_fg)) + int(np.count_nonzero(g_fg))
    if denom == 0:
        raise UndefinedMetricError("undefined foreground DSC")
    return 2.0 * int(np.count_nonzero(p_fg & g_fg)) / denom


def detection_ratio(scores: dict[int, float]) -> float:
    if not scores:
        raise ValidationError("detection ratio of an empty score map")
    return sum(1 for v in scores.values() if v > 0) / len(scores)


def summarize(scores, drop_zeros: bool = False) -> SummaryStats:
    """Median with 16th/84th percentiles (linear interpolation between ranks)."""
    vals = np.asarray(list(scores), dtype=np.float64)
    if drop_zeros:
        vals = vals[vals != 0]
    if vals.size == 0:
        raise UndefinedMetricError("no detected classes")
    lo, med, hi = np.percentile(vals, [16, 50, 84], method="linear")
    return SummaryStats(float(med), float(lo), float(hi), int(vals.size))


def score(pred: LabelVolume, gt: LabelVolume) -> ClassScores:
    per_class = dsc_per_class(pred, gt, exclude_background=True)
    present = frozenset(int(c) for c in np.unique(gt.data) if c != 0)
    return ClassScores(per_class, present, detection_ratio(per_class), dsc_foreground(pred, gt))


def xent_dice_loss(pred: SoftPrediction, gt: LabelVolume, epsilon: float = EPSILON,
                   dice_reduction: Literal["mean", "sum"] = "mean") -> LossTerms:
    """Cross-entropy plus soft-Dice loss with integer ground truth.

    The ground truth is never expanded to one-hot: per-class overlaps come
    from gathering the true-class probability at each voxel and binning it
    by label. ``dice_reduction`` averages or sums ``1 - softDSC_c`` over the
    scored classes (present in the ground truth or with predicted mass above
    ``epsilon``).
    """
    if pred.dims != gt.dims:
        raise ValidationError(f"prediction dims {pred.dims} != ground truth dims {gt.dims}")
    n_cls = pred.num_classes
    labels = gt.data.reshape(-1)
    if labels.max() >= n_cls:
        raise ValidationError("ground-truth label exceeds prediction class count")
    if dice_reduction not in ("mean", "sum"):
        raise ValidationError(f"unknown dice reduction {dice_reduction!r}")
    probs = pred.probs.reshape(-1, n_cls)
    p_true = probs[np.arange(labels.size), labels]
    xent = float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))

    inter = np.bincount(labels, weights=p_true, minlength=n_cls)
    g_count = np.bincount(labels, minlength=n_cls).astype(np.float64)
    p_mass = probs.sum(axis=0)
    scored = (g_count > 0) | (p_mass > epsilon)
    soft_dsc = (2.0 * inter[scored] + epsilon) / (p_mass[scored] + g_count[scored] + epsilon)
    losses = 1.0 - soft_dsc
    dice_term = float(losses.mean() if dice_reduction == "mean" else losses.sum())
    return LossTerms(xent + dice_term, xent, dice_term)


def evaluation_report(pred: LabelVolume, gt: LabelVolume, drop_zeros: bool = False,
                      dice_reduction: str = "mean", epsilon: float = EPSILON) -> dict:
    """JSON-ready report of per-class Dice, foreground Dice and summaries."""
    if dice_reduction not in ("mean", "sum"):
        raise ValidationError(f"unknown dice reduction {dice_reduction!r}")
    scores = score(pred, gt)
    summary = summarize(scores.dsc_per_class.values(), drop_zeros=drop_zeros)
    return {
        "per_class": {str(c): v for c, v in sorted(scores.dsc_per_class.items())},
        "dsc_fg": scores.dsc_fg,
        "detection_ratio": scores.detection_ratio,
        "summary": summary.to_dict(),
        "config": {"epsilon": epsilon, "dice_reduction": dice_reduction},
    }
