"""Evaluation metrics: rank-based AUC (Mann-Whitney with tie halving)
and fixed-threshold accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricError

ACC_THRESHOLD = 0.5


@dataclass(frozen=True)
class EvalReport:
    auc: float
    acc: float
    n_pos: int
    n_neg: int
    tag: str = ""


def _tied_ranks(values):
    """Average ranks (1-based); tied values share their mean rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scored) -> float:
    """Probability a random positive outscores a random negative, ties
    counting one half. ``scored`` is a sequence of (score, label) pairs;
    computed through average ranks in O(n log n)."""
    pairs = list(scored)
    if not pairs:
        raise MetricError("auc of an empty score set")
    scores = np.asarray([s for s, _ in pairs], dtype=np.float64)
    labels = np.asarray([l for _, l in pairs])
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(pairs) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(
            f"auc needs both classes, got {n_pos} positives and {n_neg} negatives"
        )
    ranks = _tied_ranks(scores)
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(scored) -> float:
    """(TP + TN) / N at the fixed 0.5 threshold on sigmoid scores."""
    pairs = list(scored)
    if not pairs:
        raise MetricError("accuracy of an empty score set")
    correct = sum((score >= ACC_THRESHOLD) == (label == 1) for score, label in pairs)
    return float(correct / len(pairs))


def report_from_scores(scores, labels, tag: str = "") -> EvalReport:
    scored = list(zip(np.asarray(scores, dtype=np.float64).tolist(),
                      np.asarray(labels).tolist()))
    labels_arr = np.asarray(labels)
    return EvalReport(
        auc=auc(scored),
        acc=accuracy(scored),
        n_pos=int((labels_arr == 1).sum()),
        n_neg=int((labels_arr == 0).sum()),
        tag=tag,
    )
