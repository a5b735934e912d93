"""Exact, dependency-free ranking metrics: AUROC, AUPRC, and their mean.

AUROC is the tie-aware Mann-Whitney statistic: the probability that a random
positive outscores a random negative, with ties worth half. AUPRC is average
precision with tied scores grouped into a single threshold step. ``(AUROC +
AUPRC) / 2`` is the generalization score hospitals report about each other's
models.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import SingleClassError, ValidationError


@dataclass(frozen=True)
class ScoredSet:
    """Parallel vectors of real scores and binary labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        if scores.shape != labels.shape or scores.ndim != 1:
            raise ValidationError(
                f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors"
            )
        if len(scores) == 0:
            raise ValidationError("scored set is empty")
        if not np.isin(labels, (0, 1)).all():
            raise ValidationError("labels must be 0 or 1")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(len(self.labels) - self.labels.sum())


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with tied scores sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(s: ScoredSet) -> float:
    """P(score+ > score-) + 0.5 P(score+ = score-) over all pos/neg pairs."""
    n_pos, n_neg = s.n_pos, s.n_neg
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(
            f"AUROC needs both classes, got {n_pos} positives / {n_neg} negatives"
        )
    ranks = _midranks(s.scores)
    rank_sum = float(ranks[s.labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auprc(s: ScoredSet) -> float:
    """Average precision over descending unique score thresholds.

    Tied scores form one threshold step, so the result does not depend on the
    ordering of equal-scored samples.
    """
    n_pos = s.n_pos
    if n_pos == 0:
        raise SingleClassError("AUPRC needs at least one positive")
    order = np.argsort(-s.scores, kind="mergesort")
    sorted_scores = s.scores[order]
    sorted_labels = s.labels[order]
    ap = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    n = len(sorted_scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i : j + 1].sum())
        seen += j - i + 1
        recall = tp / n_pos
        precision = tp / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return ap


def generalization_score(s: ScoredSet) -> float:
    """(AUROC + AUPRC) / 2."""
    return (auroc(s) + auprc(s)) / 2.0


def scored_set(scores: Sequence[float], labels: Sequence[int]) -> ScoredSet:
    return ScoredSet(scores=np.asarray(scores), labels=np.asarray(labels))
