"""Detection metrics: AUC-ROC, AUC-PR, precision/recall/F1 and a ranged
VUS-ROC built on linearly decaying label buffers.

VUS variant implemented here: for every buffer width w in 0..W the binary
labels are widened into continuous weights (1 inside a range, then
(w + 1 - d) / (w + 1) at distance d out to d = w, overlaps taking the max),
a weighted ROC AUC is computed over those weights, and the volume is the
mean of the per-width AUCs. No existence reward, no square-root decay, no
point adjustment.
"""

from __future__ import annotations

import numpy as np

VUS_VARIANT = "linear-buffer-mean-over-widths"


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    return scores, labels.astype(bool)


def auc_roc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, with
    ties counted half (rank formulation)."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_roc needs both classes present")
    ranks = _average_ranks(scores)
    pos_rank_sum = ranks[labels].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average of their span."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def range_labels(labels, width: int) -> np.ndarray:
    """Continuous label weights: 1 on ranges, linear decay through a buffer
    of ``width`` cells on each side, max where buffers overlap."""
    labels = np.asarray(labels, dtype=bool)
    if width < 0:
        raise ValueError("buffer width must be >= 0")
    if width == 0 or not labels.any():
        return labels.astype(np.float64)
    distance = _distance_to_true(labels)
    return np.clip((width + 1.0 - distance) / (width + 1.0), 0.0, 1.0)


def _distance_to_true(labels: np.ndarray) -> np.ndarray:
    n = labels.size
    inf = float(n + 1)
    forward = np.full(n, inf)
    last = -inf
    for i in range(n):
        if labels[i]:
            last = i
        forward[i] = i - last
    backward = np.full(n, inf)
    nxt = inf * 2
    for i in range(n - 1, -1, -1):
        if labels[i]:
            nxt = i
        backward[i] = nxt - i
    return np.minimum(forward, backward)


def weighted_auc_roc(scores: np.ndarray, weights: np.ndarray) -> float:
    """ROC AUC where each point counts ``weight`` as positive and
    ``1 - weight`` as negative; trapezoidal over unique thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total_pos = weights.sum()
    total_neg = (1.0 - weights).sum()
    if total_pos <= 0 or total_neg <= 0:
        raise ValueError("weighted auc needs mass on both classes")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    w = weights[order]
    boundary = np.nonzero(np.diff(s))[0]  # last index of each tie group
    tp = np.concatenate([[0.0], np.cumsum(w)[boundary], [total_pos]])
    fp = np.concatenate([[0.0], np.cumsum(1.0 - w)[boundary], [total_neg]])
    tpr = tp / total_pos
    fpr = fp / total_neg
    return float(np.trapezoid(tpr, fpr))


def vus_roc(scores, labels, max_width: int) -> float:
    """Mean weighted ROC AUC over buffer widths 0..max_width."""
    scores, labels = _validate(scores, labels)
    if max_width < 0:
        raise ValueError("max_width must be >= 0")
    if not labels.any() or labels.all():
        raise ValueError("vus_roc needs both classes present")
    aucs = [
        weighted_auc_roc(scores, range_labels(labels, w))
        for w in range(max_width + 1)
    ]
    return float(np.mean(aucs))


def precision_recall_f1(scores, labels, threshold: float) -> tuple[float, float, float]:
    """Binary precision/recall/F1 for the rule ``score >= threshold``."""
    scores, labels = _validate(scores, labels)
    predicted = scores >= threshold
    tp = int((predicted & labels).sum())
    fp = int((predicted & ~labels).sum())
    fn = int((~predicted & labels).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def auc_pr(scores, labels) -> float:
    """Trapezoidal area under the precision-recall curve."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("auc_pr needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    hits = labels[order].astype(np.float64)
    boundary = np.nonzero(np.diff(scores[order]))[0]
    keep = np.concatenate([boundary, [scores.size - 1]])
    tp = np.cumsum(hits)[keep]
    count = keep + 1.0
    precision = tp / count
    recall = tp / n_pos
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[precision[0]], precision])
    return float(np.trapezoid(precision, recall))


def combined_objective(auc: float, vus: float) -> float:
    """Fixed 30:70 blend of AUC-ROC and VUS-ROC."""
    for name, value in (("auc", auc), ("vus", vus)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value}")
    return 0.3 * auc + 0.7 * vus


def infer_metric_window(labels) -> int:
    """Default VUS max width: the median labeled-range length."""
    labels = np.asarray(labels, dtype=bool)
    from .data import label_runs

    runs = label_runs(labels)
    if not runs:
        return 0
    lengths = [stop - start for start, stop in runs]
    return int(np.median(lengths))
