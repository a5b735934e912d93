"""Prediction-time ensembling and uncertainty statistics.

The trained ensemble is one shared body plus the final-round head of each
kept hospital: a sample gets one probability per head, the prediction is
their mean, and the spread (population std, vote disagreement) is the raw
uncertainty signal. Aggregate tables slice that signal three ways: std as a
function of the mean score, mean std per age bin and predicted class, and
vote histograms split by true class and correctness.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import FeatureVector, PatientRecord, featurize_all
from .errors import ValidationError
from .federation import TrainedResult
from .learner import Body, Head, sigmoid

# Age bins: half-open [lo, hi), jointly covering the valid age range [12, 60].
DEFAULT_AGE_BINS: tuple[tuple[int, int], ...] = (
    (12, 20),
    (20, 26),
    (26, 31),
    (31, 36),
    (36, 41),
    (41, 61),
)


def age_bin_label(bin_range: tuple[int, int]) -> str:
    lo, hi = bin_range
    if lo <= 12:
        return f"<{hi}"
    if hi >= 61:
        return f">={lo}"
    return f"{lo}-{hi - 1}"


@dataclass(frozen=True)
class EnsembleModel:
    """Shared body plus an ordered list of (hospital_id, head) members."""

    body: Body
    heads: tuple[tuple[int, Head], ...]
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if not self.heads:
            raise ValidationError("ensemble needs at least one head")
        if not (0.0 < self.threshold < 1.0):
            raise ValidationError(f"threshold must be in (0, 1), got {self.threshold}")
        h = self.body.W1.shape[0]
        for _, head in self.heads:
            if head.W2.shape != (h,):
                raise ValidationError("head dimensions inconsistent with body")

    @property
    def n_heads(self) -> int:
        return len(self.heads)


def ensemble_from_result(result: TrainedResult, threshold: float = 0.5) -> EnsembleModel:
    """Ensemble = final average model's body + the kept per-hospital heads."""
    if not result.hospital_heads:
        raise ValidationError(
            f"{result.algorithm.value} result carries no hospital heads"
        )
    heads = tuple((k, result.hospital_heads[k]) for k in sorted(result.hospital_heads))
    return EnsembleModel(body=result.final_model.body, heads=heads, threshold=threshold)


def ensemble_scores(m: EnsembleModel, X: np.ndarray) -> np.ndarray:
    """(n, C) matrix of per-head probabilities, columns in head order."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.body.W1.shape[1]:
        raise ValidationError(
            f"feature matrix shape {X.shape} does not match body input {m.body.W1.shape[1]}"
        )
    hidden = np.tanh(X @ m.body.W1.T + m.body.b1)
    out = np.empty((X.shape[0], m.n_heads))
    for j, (_, head) in enumerate(m.heads):
        out[:, j] = sigmoid(hidden @ head.W2 + head.b2)
    return out


def ensemble_predict(m: EnsembleModel, x: FeatureVector | np.ndarray) -> np.ndarray:
    """Per-head probabilities for one sample, in head order."""
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)
    return ensemble_scores(m, values.reshape(1, -1))[0]


def final_prediction(head_scores: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation of the per-head scores."""
    head_scores = np.asarray(head_scores, dtype=np.float64)
    if head_scores.size == 0:
        raise ValidationError("no head scores to aggregate")
    return float(head_scores.mean()), float(head_scores.std())


@dataclass(frozen=True)
class VoteSummary:
    """Per-sample positive votes plus histograms by (true class, correctness)."""

    votes: np.ndarray
    predicted: np.ndarray
    correct: np.ndarray
    n_heads: int
    histograms: dict[tuple[int, bool], np.ndarray]


def _decide(mean_scores: np.ndarray, votes: np.ndarray, m: EnsembleModel, rule: str) -> np.ndarray:
    if rule == "mean":
        return (mean_scores > m.threshold).astype(np.int64)
    if rule == "majority":
        return (votes > m.n_heads / 2.0).astype(np.int64)
    raise ValidationError(f"unknown decision rule {rule!r}")


def vote_counts(
    m: EnsembleModel,
    records: Sequence[PatientRecord],
    decision_rule: str = "mean",
) -> VoteSummary:
    """Count heads voting positive per sample and histogram the counts.

    A sample's decision follows ``decision_rule`` ("mean": average score vs
    threshold, the evaluated configuration; "majority": head vote count).
    Histograms cover vote values 0..C for each (true class, correct?) cell.
    """
    X, y = featurize_all(records, m.body.W1.shape[1])
    s = ensemble_scores(m, X)
    votes = (s > m.threshold).sum(axis=1)
    predicted = _decide(s.mean(axis=1), votes, m, decision_rule)
    correct = predicted == y.astype(np.int64)
    histograms: dict[tuple[int, bool], np.ndarray] = {}
    for label in (0, 1):
        for is_correct in (False, True):
            mask = (y == label) & (correct == is_correct)
            histograms[(label, is_correct)] = np.bincount(
                votes[mask], minlength=m.n_heads + 1
            )
    return VoteSummary(
        votes=votes,
        predicted=predicted,
        correct=correct,
        n_heads=m.n_heads,
        histograms=histograms,
    )


def validate_bins(bins: Sequence[tuple[int, int]]) -> None:
    """Bins must be non-overlapping, gap-free, and in increasing order."""
    if not bins:
        raise ValidationError("no bins given")
    for lo, hi in bins:
        if hi <= lo:
            raise ValidationError(f"empty bin ({lo}, {hi})")
    for (_, hi_prev), (lo, _) in zip(bins, bins[1:]):
        if lo != hi_prev:
            raise ValidationError(
                f"bins must tile without gap or overlap; saw boundary {hi_prev} then {lo}"
            )


def group_uncertainty(
    m: EnsembleModel,
    records: Sequence[PatientRecord],
    bins: Sequence[tuple[int, int]] = DEFAULT_AGE_BINS,
    decision_rule: str = "mean",
) -> dict[tuple[str, int], tuple[float, int]]:
    """Mean per-sample prediction std within each (age bin, predicted class).

    Returns ``{(bin label, predicted class): (mean std, count)}``; empty
    cells are absent, not zero.
    """
    validate_bins(bins)
    X, _ = featurize_all(records, m.body.W1.shape[1])
    s = ensemble_scores(m, X)
    stds = s.std(axis=1)
    votes = (s > m.threshold).sum(axis=1)
    predicted = _decide(s.mean(axis=1), votes, m, decision_rule)
    ages = np.array([rec.age for rec in records])

    out: dict[tuple[str, int], tuple[float, int]] = {}
    lo_all, hi_all = bins[0][0], bins[-1][1]
    outside = (ages < lo_all) | (ages >= hi_all)
    if outside.any():
        raise ValidationError(
            f"age {int(ages[outside][0])} falls outside the bins [{lo_all}, {hi_all})"
        )
    for bin_range in bins:
        lo, hi = bin_range
        in_bin = (ages >= lo) & (ages < hi)
        for cls in (0, 1):
            mask = in_bin & (predicted == cls)
            if mask.any():
                out[(age_bin_label(bin_range), cls)] = (float(stds[mask].mean()), int(mask.sum()))
    return out


# Mean-score bin edges for the std-vs-mean table.
SCORE_BIN_EDGES = np.linspace(0.0, 1.0, 11)


@dataclass(frozen=True)
class UncertaintyReport:
    """Everything the uncertainty CSVs contain, in memory."""

    ids: tuple[str, ...]
    labels: np.ndarray
    mean_scores: np.ndarray
    stds: np.ndarray
    votes: np.ndarray
    predicted: np.ndarray
    n_heads: int
    std_vs_mean: tuple[tuple[float, float, int, float], ...]
    group_std: tuple[tuple[str, int, float, int], ...]
    vote_histograms: dict[tuple[int, bool], np.ndarray]


def build_report(
    m: EnsembleModel,
    records: Sequence[PatientRecord],
    bins: Sequence[tuple[int, int]] = DEFAULT_AGE_BINS,
    decision_rule: str = "mean",
) -> UncertaintyReport:
    X, y = featurize_all(records, m.body.W1.shape[1])
    s = ensemble_scores(m, X)
    mean_scores = s.mean(axis=1)
    stds = s.std(axis=1)
    summary = vote_counts(m, records, decision_rule)

    std_rows = []
    for lo, hi in zip(SCORE_BIN_EDGES[:-1], SCORE_BIN_EDGES[1:]):
        mask = (mean_scores >= lo) & (mean_scores < hi if hi < 1.0 else mean_scores <= hi)
        if mask.any():
            std_rows.append((float(lo), float(hi), int(mask.sum()), float(stds[mask].mean())))

    groups = group_uncertainty(m, records, bins, decision_rule)
    group_rows = tuple(
        (label, cls, mean_std, n) for (label, cls), (mean_std, n) in sorted(groups.items())
    )
    return UncertaintyReport(
        ids=tuple(rec.id for rec in records),
        labels=y.astype(np.int64),
        mean_scores=mean_scores,
        stds=stds,
        votes=summary.votes,
        predicted=summary.predicted,
        n_heads=m.n_heads,
        std_vs_mean=tuple(std_rows),
        group_std=group_rows,
        vote_histograms=summary.histograms,
    )


def write_report_csvs(report: UncertaintyReport, out_dir: str) -> list[str]:
    """Write per_sample.csv, std_vs_mean.csv, group_std.csv, votes_hist.csv."""
    import os

    paths = []

    path = os.path.join(out_dir, "per_sample.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "mean", "std", "vote"])
        for i, rec_id in enumerate(report.ids):
            writer.writerow(
                [
                    rec_id,
                    int(report.labels[i]),
                    repr(float(report.mean_scores[i])),
                    repr(float(report.stds[i])),
                    int(report.votes[i]),
                ]
            )
    paths.append(path)

    path = os.path.join(out_dir, "std_vs_mean.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "n", "mean_std"])
        for lo, hi, n, mean_std in report.std_vs_mean:
            writer.writerow([repr(lo), repr(hi), n, repr(mean_std)])
    paths.append(path)

    path = os.path.join(out_dir, "group_std.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin", "class", "mean_std", "n"])
        for label, cls, mean_std, n in report.group_std:
            writer.writerow([label, cls, repr(mean_std), n])
    paths.append(path)

    path = os.path.join(out_dir, "votes_hist.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "correctness", "vote", "count"])
        for (label, is_correct) in sorted(report.vote_histograms):
            hist = report.vote_histograms[(label, is_correct)]
            for vote, count in enumerate(hist):
                writer.writerow([label, "correct" if is_correct else "incorrect", vote, int(count)])
    paths.append(path)

    return paths
