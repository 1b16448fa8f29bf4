"""Evaluation metrics: ranking metrics, correlation, bootstrap CIs, cell F1, PQ/DQ/SQ."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


class MetricError(ValueError):
    pass


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.size and not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    return y.astype(bool)


def _tie_groups(sorted_values: np.ndarray) -> np.ndarray:
    """Start indices of runs of equal values in an already sorted array."""
    if sorted_values.size == 0:
        return np.zeros(0, dtype=int)
    change = np.flatnonzero(sorted_values[1:] != sorted_values[:-1]) + 1
    return np.concatenate([[0], change])


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC, P(s+ > s-) + P(s+ == s-)/2, with exact tie handling.

    Twice the U statistic is accumulated as an integer from mid-ranks so the
    result is a single rounding of an exact rational.
    """
    s = np.asarray(scores, dtype=float)
    y = _as_binary(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc needs both classes")
    order = np.argsort(s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    starts = _tie_groups(s_sorted)
    ends = np.append(starts[1:], s.size)
    # twice the mid-rank of a tie group [a, b) with 1-based ranks: a + b + 1
    twice_rank = np.repeat(starts + ends + 1, ends - starts)
    twice_rank_sum = int(twice_rank[y_sorted].sum())
    twice_u = twice_rank_sum - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, recall, precision), one point per distinct score, descending."""
    s = np.asarray(scores, dtype=float)
    y = _as_binary(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("precision-recall needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    starts = _tie_groups(s_sorted)
    last = np.append(starts[1:], s.size) - 1
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    return s_sorted[starts], tp / n_pos, tp / (tp + fp)


def average_precision(scores, labels) -> float:
    """Step-wise AP, sum over thresholds of (R_i - R_{i-1}) * P_i, ties grouped."""
    _, recall, precision = pr_curve(scores, labels)
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


# ---------------------------------------------------------------------------
# Pearson correlation and the Student-t tail


def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def pearson(x, y) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("pearson needs two 1-D arrays of equal length")
    n = x.size
    if n < 3:
        raise MetricError("pearson needs at least 3 points")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("pearson undefined for zero variance")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt(df / (1.0 - r * r))
    return r, t_sf_two_sided(t, df)


# ---------------------------------------------------------------------------
# bootstrap


def bootstrap_ci(
    statistic: Callable[..., float],
    sample,
    n_reps: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> tuple[float, float, float]:
    """Percentile bootstrap: (point estimate on the full sample, lo, hi).

    ``sample`` is an array resampled along axis 0, or a tuple of arrays
    resampled jointly (paired data). Replicate i draws its indices from a
    generator seeded with (seed, i), so results do not depend on evaluation
    order.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    paired = isinstance(sample, tuple)
    arrays = tuple(np.asarray(a) for a in sample) if paired else (np.asarray(sample),)
    n = len(arrays[0])
    if n == 0:
        raise ValueError("empty sample")
    if any(len(a) != n for a in arrays):
        raise ValueError("paired arrays differ in length")

    def stat(arrs):
        return float(statistic(*arrs) if paired else statistic(arrs[0]))

    point = stat(arrays)
    reps = np.empty(n_reps)
    for i in range(n_reps):
        idx = np.random.default_rng([seed, i]).integers(0, n, size=n)
        reps[i] = stat(tuple(a[idx] for a in arrays))
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [alpha, 1.0 - alpha])
    return point, float(lo), float(hi)


# ---------------------------------------------------------------------------
# instance matching and quality metrics


@dataclass
class MatchResult:
    pairs: list[tuple[Hashable, Hashable, float]] = field(default_factory=list)
    unmatched_pred: list[Hashable] = field(default_factory=list)
    unmatched_gt: list[Hashable] = field(default_factory=list)


def rasterize_polygon(poly, shape: tuple[int, int], origin: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Even-odd fill of a closed polygon, sampled at pixel centres.

    ``poly`` holds (x, y) vertices; pixel (row, col) of the output covers
    x in [origin_x + col, origin_x + col + 1), y likewise.
    """
    v = np.asarray(poly, dtype=float)
    if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
        raise ValueError("polygon needs at least 3 (x, y) vertices")
    h, w = shape
    ys = origin[1] + np.arange(h) + 0.5
    xs = origin[0] + np.arange(w) + 0.5
    px, py = np.meshgrid(xs, ys)
    inside = np.zeros(shape, dtype=bool)
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > py) != (by > py)
        xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    return inside


def iou_matrix(pred: Mapping[Hashable, Sequence], gt: Mapping[Hashable, Sequence]):
    """Pairwise IoU of rasterized polygons on their common integer grid."""
    pred_ids, gt_ids = list(pred), list(gt)
    iou = np.zeros((len(pred_ids), len(gt_ids)))
    if not pred_ids or not gt_ids:
        return pred_ids, gt_ids, iou
    allv = np.concatenate([np.asarray(p, dtype=float) for p in [*pred.values(), *gt.values()]])
    x0, y0 = np.floor(allv.min(axis=0)).astype(int)
    x1, y1 = np.ceil(allv.max(axis=0)).astype(int)
    shape = (max(y1 - y0, 1), max(x1 - x0, 1))
    pm = np.stack([rasterize_polygon(pred[i], shape, (x0, y0)).ravel() for i in pred_ids]).astype(np.int64)
    gm = np.stack([rasterize_polygon(gt[j], shape, (x0, y0)).ravel() for j in gt_ids]).astype(np.int64)
    inter = pm @ gm.T
    union = pm.sum(1)[:, None] + gm.sum(1)[None, :] - inter
    np.divide(inter, union, out=iou, where=union > 0)
    return pred_ids, gt_ids, iou


def match_from_iou(pred_ids: list, gt_ids: list, iou: np.ndarray, thresh: float = 0.5) -> MatchResult:
    """One-to-one matching over pairs with IoU > thresh.

    Maximizes the number of matches, then the total IoU. For non-overlapping
    instance sets every eligible pair is already unique and this reduces to
    keeping all of them.
    """
    eligible = iou > thresh
    pairs = []
    if eligible.any():
        big = float(min(iou.shape) + 1)
        weight = np.where(eligible, big + iou, 0.0)
        rows, cols = linear_sum_assignment(weight, maximize=True)
        pairs = [(pred_ids[i], gt_ids[j], float(iou[i, j])) for i, j in zip(rows, cols) if eligible[i, j]]
    mp = {p for p, _, _ in pairs}
    mg = {g for _, g, _ in pairs}
    return MatchResult(pairs, [p for p in pred_ids if p not in mp], [g for g in gt_ids if g not in mg])


def match_instances(pred: Mapping[Hashable, Sequence], gt: Mapping[Hashable, Sequence], thresh: float = 0.5) -> MatchResult:
    pred_ids, gt_ids, iou = iou_matrix(pred, gt)
    return match_from_iou(pred_ids, gt_ids, iou, thresh)


def pq_dq_sq(match: MatchResult) -> tuple[float, float, float]:
    tp, fp, fn = len(match.pairs), len(match.unmatched_pred), len(match.unmatched_gt)
    denom = tp + 0.5 * fp + 0.5 * fn
    dq = tp / denom if denom > 0 else 0.0
    sq = float(np.mean([p[2] for p in match.pairs])) if tp else 0.0
    return dq * sq, dq, sq


def f1_counts(pred_cls: Mapping[Hashable, str], gt_cls: Mapping[Hashable, str], match: MatchResult) -> dict[str, tuple[int, int, int]]:
    """Per-class (TP, FP, FN) over matched pairs plus detection errors."""
    tp: dict[str, int] = {}
    pred_n: dict[str, int] = {}
    gt_n: dict[str, int] = {}
    for c in pred_cls.values():
        pred_n[c] = pred_n.get(c, 0) + 1
    for c in gt_cls.values():
        gt_n[c] = gt_n.get(c, 0) + 1
    for p, g, _ in match.pairs:
        if pred_cls[p] == gt_cls[g]:
            tp[pred_cls[p]] = tp.get(pred_cls[p], 0) + 1
    out = {}
    for c in sorted(set(pred_n) | set(gt_n)):
        t = tp.get(c, 0)
        out[c] = (t, pred_n.get(c, 0) - t, gt_n.get(c, 0) - t)
    return out


def f1_per_class(pred_cls: Mapping[Hashable, str], gt_cls: Mapping[Hashable, str], match: MatchResult) -> dict[str, float]:
    """Classification F1 per class; classes absent from both sides are omitted."""
    return {c: 2 * t / (2 * t + fp + fn) for c, (t, fp, fn) in f1_counts(pred_cls, gt_cls, match).items()}
