"""Metrics and significance machinery: accuracy, one-vs-rest AUC, t-tests.

AUC is the rank statistic with midrank tie handling (each tied pair counts
0.5), averaged unweighted over classes that have both positives and
negatives. The paired t-test runs on per-sample 0/1 correctness vectors
with two-sided p-values from the regularized incomplete beta function;
zero-variance differences degenerate to p = 1 (no difference) or p = 0
(constant nonzero difference).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np


class StatsError(ValueError):
    """Empty inputs, misaligned pairings, or invalid result records."""


@dataclass
class RunResult:
    """Per-seed test-set record: the unit every statistic consumes."""

    encoder_id: str
    seed: int
    fold: int
    labels: list
    predicted: list
    scores: np.ndarray  # [n_samples, n_classes] softmax rows

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.labels)
        if len(self.predicted) != n or self.scores.shape[0] != n:
            raise StatsError(
                f"{self.encoder_id}: labels/predicted/scores lengths differ")
        if n and np.max(np.abs(self.scores.sum(axis=1) - 1.0)) > 1e-9:
            raise StatsError(f"{self.encoder_id}: score rows must sum to 1")
        if n and not np.array_equal(np.argmax(self.scores, axis=1),
                                    self.predicted):
            raise StatsError(
                f"{self.encoder_id}: predicted must be argmax of scores")

    def correctness(self) -> np.ndarray:
        return (np.asarray(self.predicted) == np.asarray(self.labels)).astype(
            np.float64)


@dataclass
class MetricSummary:
    mean: float
    std: Optional[float]  # sample std (n-1); None when n_runs < 2
    n_runs: int


@dataclass
class SignificanceMatrix:
    encoder_ids: list
    p_values: np.ndarray  # symmetric, unit diagonal
    verdicts: list  # verdicts[i][j] in {a_wins, b_wins, none}; a = ids[i]
    threshold: float


def accuracy(result: RunResult) -> float:
    """Fraction of predictions equal to labels."""
    if not result.labels:
        raise StatsError("accuracy of an empty result is undefined")
    return float(result.correctness().mean())


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-indexed ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j < len(values) and values[order[j]] == values[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    return ranks


def binary_auc(positives: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based AUC; ties contribute 0.5 per tied pair."""
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise StatsError("AUC needs at least one positive and one negative")
    ranks = _midranks(np.asarray(scores, dtype=np.float64))
    pos_rank_sum = ranks[positives].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def ovr_auc(result: RunResult) -> float:
    """One-vs-rest AUC per class, averaged unweighted over usable classes.

    Classes with no positives or no negatives are skipped; if every class
    is skipped this is an error.
    """
    labels = np.asarray(result.labels)
    if labels.size == 0:
        raise StatsError("AUC of an empty result is undefined")
    per_class = []
    for c in range(result.scores.shape[1]):
        positives = labels == c
        if positives.all() or not positives.any():
            continue
        per_class.append(binary_auc(positives, result.scores[:, c]))
    if not per_class:
        raise StatsError("no class has both positives and negatives")
    return float(np.mean(per_class))


def aggregate_runs(values: Sequence[float]) -> MetricSummary:
    """Mean and sample standard deviation (n-1 denominator) over runs."""
    values = list(values)
    if not values:
        raise StatsError("cannot aggregate zero runs")
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) >= 2 else None
    return MetricSummary(mean=mean, std=std, n_runs=len(values))


def format_mean_std(summary: MetricSummary, scale: float = 1.0) -> str:
    """Table rendering, e.g. mean 95.71 and std 1.01 -> '95.71 ± 1.01'."""
    mean = summary.mean * scale
    if summary.std is None:
        return f"{mean:.2f}"
    return f"{mean:.2f} ± {summary.std * scale:.2f}"


# ---------------------------------------------------------------------------
# Student t machinery

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    max_iter, eps, fpmin = 300, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(1.0 - x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for T ~ Student(df)."""
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def paired_ttest(a_correct: Sequence[float], b_correct: Sequence[float]) -> float:
    """Two-sided paired t-test p-value on per-sample correctness vectors.

    Element i of both vectors must refer to the same test sample. With
    zero-variance differences: p = 1 when the mean difference is zero,
    p = 0 otherwise (continuous limit of the statistic).
    """
    a = np.asarray(a_correct, dtype=np.float64)
    b = np.asarray(b_correct, dtype=np.float64)
    if a.shape != b.shape:
        raise StatsError(f"paired vectors differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise StatsError("paired t-test needs n >= 2")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    t = mean / (sd / math.sqrt(n))
    return student_t_two_sided_p(t, n - 1)


def significance_matrix(results: Iterable[RunResult],
                        threshold: float = 0.05) -> SignificanceMatrix:
    """Pairwise paired t-tests over correctness concatenated across folds.

    Every encoder must have results for the same folds, and within each
    fold all encoders must have been evaluated on identical test samples
    (checked via the label sequences).
    """
    by_encoder: dict = {}
    for r in results:
        by_encoder.setdefault(r.encoder_id, {})
        if r.fold in by_encoder[r.encoder_id]:
            raise StatsError(f"{r.encoder_id}: duplicate fold {r.fold}")
        by_encoder[r.encoder_id][r.fold] = r
    if len(by_encoder) < 2:
        raise StatsError("need results from at least two encoders")
    encoder_ids = sorted(by_encoder)
    fold_sets = {e: tuple(sorted(by_encoder[e])) for e in encoder_ids}
    folds = fold_sets[encoder_ids[0]]
    for e, fs in fold_sets.items():
        if fs != folds:
            raise StatsError(
                f"misaligned folds: {encoder_ids[0]} has {folds}, {e} has {fs}")
    reference = by_encoder[encoder_ids[0]]
    for e in encoder_ids[1:]:
        for fold in folds:
            if by_encoder[e][fold].labels != reference[fold].labels:
                raise StatsError(
                    f"misaligned samples in fold {fold} between "
                    f"{encoder_ids[0]} and {e}")

    def concat_correct(e):
        return np.concatenate(
            [by_encoder[e][fold].correctness() for fold in folds])

    k = len(encoder_ids)
    p_values = np.ones((k, k))
    verdicts = [["none"] * k for _ in range(k)]
    for i in range(k):
        for j in range(i + 1, k):
            ci, cj = concat_correct(encoder_ids[i]), concat_correct(encoder_ids[j])
            p = paired_ttest(ci, cj)
            p_values[i, j] = p_values[j, i] = p
            diff = float(ci.mean() - cj.mean())
            if p < threshold and diff != 0.0:
                verdicts[i][j] = "a_wins" if diff > 0 else "b_wins"
                verdicts[j][i] = "a_wins" if diff < 0 else "b_wins"
    return SignificanceMatrix(encoder_ids=encoder_ids, p_values=p_values,
                              verdicts=verdicts, threshold=threshold)
