"""Ranking, overlap and aggregation metrics."""

from __future__ import annotations

import math
from bisect import bisect_right
from collections import OrderedDict
from typing import Dict, Hashable, Sequence

import numpy as np

from .numerics import keyed_rng


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype != bool:
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be binary")
        y = y.astype(bool)
    return y


def auprc(scores, labels) -> float:
    """Average precision: sum_n (R_n - R_{n-1}) P_n over descending unique thresholds.

    Tied scores enter at a single threshold, so their order never matters.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    # midranks handle ties with half credit
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    ss = s[order]
    i = 0
    while i < len(ss):
        j = i
        while j + 1 < len(ss) and ss[j + 1] == ss[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def dice(pred, gt) -> float:
    """2|A & B| / (|A| + |B|); two empty masks score 1.0.

    Conventions differ on the empty/empty case (some report NaN or skip the
    sample); 1.0 rewards correctly predicting absence.
    """
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def macro(values: Sequence[float]) -> float:
    return float(np.mean(values))


def mean_std(values: Sequence[float]) -> Dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=0))}


def bin_continuous(value: float, edges: Sequence[float]) -> int:
    """Left-inclusive bin index with open ends: i iff edges[i-1] <= value < edges[i]."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        raise ValueError("cannot bin NaN")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("edges must be strictly increasing")
    return bisect_right(list(edges), value)


AGE_EDGES = (20, 40, 60, 80)
WEIGHT_EDGES = (50, 65, 80, 95)
BMI_EDGES = (18.5, 25, 30, 35)


def stratified_metric(values: Sequence[float], groups: Sequence[Hashable]) -> Dict[str, object]:
    """Per-group means, the worst (lowest) group mean and the overall mean."""
    if len(values) == 0:
        raise ValueError("no samples to stratify")
    if len(values) != len(groups):
        raise ValueError("every sample needs a group")
    acc: "OrderedDict[Hashable, list]" = OrderedDict()
    for v, g in zip(values, groups):
        acc.setdefault(g, []).append(float(v))
    per = {g: float(np.mean(v)) for g, v in acc.items()}
    return {"per_group": per, "worst": min(per.values()), "overall": float(np.mean(values))}


def bootstrap_ci(values: Sequence[float], n_resamples: int = 500, seed: int = 0) -> Dict[str, float]:
    """Median and 95% interval of the resampled mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("bootstrap needs at least one value")
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    rng = keyed_rng(seed, "bootstrap")
    idx = rng.integers(0, v.size, size=(n_resamples, v.size))
    means = v[idx].mean(axis=1)
    lo, med, hi = np.percentile(means, [2.5, 50.0, 97.5])
    return {"median": float(med), "lo95": float(lo), "hi95": float(hi)}
