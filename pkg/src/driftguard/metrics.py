"""Oracle-side evaluation: confusion matrix, per-class IoU, mIoU, and rank
correlation for scoring validators."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, UndefinedMetricError

PLAIN = "plain"
TOP_WEIGHTED = "top_weighted"


def confusion(labels_true, labels_pred, num_classes: int, ignore_mask=None) -> np.ndarray:
    """One K x K count matrix over the whole eval set (rows: truth)."""
    t = np.asarray(labels_true, dtype=np.int64)
    p = np.asarray(labels_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ConfigError("label vectors must have equal length")
    if ignore_mask is not None:
        keep = ~np.asarray(ignore_mask, dtype=bool)
        t, p = t[keep], p[keep]
    if t.size and (t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes):
        raise ConfigError("label out of range")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """IoU_k = TP / (TP + FP + FN); NaN where the denominator is zero."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def miou(cm: np.ndarray) -> float:
    """Mean IoU over classes with a nonzero denominator."""
    ious = iou_per_class(cm)
    valid = ~np.isnan(ious)
    if not valid.any():
        raise UndefinedMetricError("all classes empty; mIoU undefined")
    return float(ious[valid].mean())


def miou_points(cm: np.ndarray) -> float:
    """mIoU in percentage points (the unit used throughout reports)."""
    return 100.0 * miou(cm)


def spearman(scores, targets, weighting: str = PLAIN) -> float:
    """Rank correlation in [-1, 1].  top_weighted up-weights pairs with
    higher targets (weights linear in target rank)."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if s.shape != t.shape or s.size < 3:
        raise ConfigError("need >= 3 aligned (score, target) pairs")
    rs = rankdata(s)
    rt = rankdata(t)
    if np.all(rs == rs[0]) or np.all(rt == rt[0]):
        raise UndefinedMetricError("constant ranks; correlation undefined")
    if weighting == PLAIN:
        w = np.ones_like(rs)
    elif weighting == TOP_WEIGHTED:
        w = rt / rt.sum()
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")
    w = w / w.sum()
    ms, mt = (w * rs).sum(), (w * rt).sum()
    cov = (w * (rs - ms) * (rt - mt)).sum()
    var_s = (w * (rs - ms) ** 2).sum()
    var_t = (w * (rt - mt) ** 2).sum()
    return float(cov / np.sqrt(var_s * var_t))
