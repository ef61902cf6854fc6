"""Agreement and error metrics between predicted and ground-truth VAS labels."""

from __future__ import annotations

import math

import numpy as np

N_LEVELS = 11


def _pair(preds, truths):
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def icc(preds, truths) -> float:
    """ICC(3,1): two-way mixed effects, consistency, single rater.

    Targets are the videos, the two "raters" are the model and the ground
    truth. Returns NaN when the denominator vanishes (no variance at all).
    """
    p, t = _pair(preds, truths)
    n = p.size
    if n < 2:
        raise ValueError("ICC needs at least two targets")
    X = np.stack([p, t], axis=1)
    k = 2
    grand = X.mean()
    ss_rows = k * np.sum((X.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((X.mean(axis=0) - grand) ** 2)
    ss_total = np.sum((X - grand) ** 2)
    ss_err = max(ss_total - ss_rows - ss_cols, 0.0)
    bms = ss_rows / (n - 1)
    ems = ss_err / ((n - 1) * (k - 1))
    denom = bms + (k - 1) * ems
    if denom <= 1e-12 * max(ss_total / (n - 1), 1e-300):
        return math.nan
    return float((bms - ems) / denom)


def mae(preds, truths) -> float:
    p, t = _pair(preds, truths)
    return float(np.mean(np.abs(p - t)))


def rmse(preds, truths) -> float:
    p, t = _pair(preds, truths)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae_per_intensity(preds, truths, n_levels: int = N_LEVELS):
    """MAE within each ground-truth level; NaN where a level has no videos.

    Returns ``(per_level, macro)`` with the macro average over populated levels.
    """
    p, t = _pair(preds, truths)
    per = np.full(n_levels, np.nan)
    for level in range(n_levels):
        sel = t == level
        if sel.any():
            per[level] = np.mean(np.abs(p[sel] - t[sel]))
    defined = per[~np.isnan(per)]
    macro = float(defined.mean()) if defined.size else math.nan
    return per, macro


def majority_label(train_labels) -> int:
    """Most frequent training label; ties go to the label nearest the training median."""
    labels = np.asarray(train_labels, dtype=int)
    counts = np.bincount(labels, minlength=N_LEVELS)
    modes = np.flatnonzero(counts == counts.max())
    med = np.median(labels)
    return int(modes[np.argmin(np.abs(modes - med))])
