"""Classification metrics, stratified folds, confidence bands and rank tests.

BASAL (1) is the positive class throughout.
"""

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from ._validation import check_array, check_binary_labels, check_probabilities
from .exceptions import DegenerateStatisticsError, InputValidationError

BASAL, CLASSICAL = 1, 0
METRIC_NAMES = ("auc", "accuracy", "balanced_accuracy", "sensitivity", "specificity")


class UndefinedAUCError(DegenerateStatisticsError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    truth: int
    prob: float

    def __post_init__(self):
        if self.truth not in (0, 1):
            raise InputValidationError(f"{self.sample_id}: truth must be 0 or 1")
        if not (0.0 <= self.prob <= 1.0):
            raise InputValidationError(f"{self.sample_id}: prob {self.prob} outside [0, 1]")


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    accuracy: float
    balanced_accuracy: float
    sensitivity: float
    specificity: float
    n: int

    def to_dict(self):
        return asdict(self)


def _unpack(records):
    truth = check_binary_labels([r.truth for r in records], "truth")
    prob = check_probabilities([r.prob for r in records])
    return truth, prob


def midranks(x):
    """1-based ranks with ties replaced by their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_score(truth, scores):
    truth = check_binary_labels(truth, "truth")
    scores = check_array(scores, ndim=1, name="scores")
    n1 = int(truth.sum())
    n0 = truth.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedAUCError("AUC needs both classes present")
    r = midranks(scores)
    u = r[truth == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_auc(records):
    truth, prob = _unpack(records)
    return auc_score(truth, prob)


def confusion_metrics(records, threshold=0.5, auc=True):
    """Threshold metrics; a record is called BASAL when ``prob >= threshold``.

    Rates over an absent class are reported as NaN, as is AUC when only one
    class is present.
    """
    records = list(records)
    if not records:
        raise InputValidationError("confusion_metrics needs at least one record")
    truth, prob = _unpack(records)
    pred = (prob >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    tn = int(np.sum((pred == 0) & (truth == 0)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    sens = tp / (tp + fn) if tp + fn else math.nan
    spec = tn / (tn + fp) if tn + fp else math.nan
    try:
        auc_value = auc_score(truth, prob) if auc else math.nan
    except UndefinedAUCError:
        auc_value = math.nan
    return MetricsReport(
        auc=auc_value,
        accuracy=(tp + tn) / len(records),
        balanced_accuracy=(sens + spec) / 2.0,
        sensitivity=sens,
        specificity=spec,
        n=len(records),
    )


def filter_high_confidence(records, lo=0.10, hi=0.90):
    if lo > hi:
        raise InputValidationError(f"lo ({lo}) > hi ({hi})")
    records = list(records)
    kept = [r for r in records if r.prob <= lo or r.prob >= hi]
    frac = len(kept) / len(records) if records else math.nan
    return kept, frac


def confidence_band(prob, lo=0.10, hi=0.90):
    if prob <= lo or prob >= hi:
        return "high"
    return "low"


class MarginSummary(NamedTuple):
    margins: np.ndarray
    median_correct: float
    median_incorrect: float


def decision_margin(records, threshold=0.5):
    """``|prob - 0.5|`` per record and its median among correct / incorrect calls."""
    records = list(records)
    truth, prob = _unpack(records)
    margins = np.abs(prob - 0.5)
    correct = (prob >= threshold).astype(np.int64) == truth
    med = lambda m: float(np.median(m)) if m.size else math.nan  # noqa: E731
    return MarginSummary(margins, med(margins[correct]), med(margins[~correct]))


class MannWhitneyResult(NamedTuple):
    u: float  # pairs (a, b) with a > b, ties counted 1/2
    u_min: float
    pvalue: float
    small_sample: bool


def mann_whitney_u(group_a, group_b):
    """Two-sided Mann-Whitney U test, normal approximation with tie and continuity correction."""
    a = check_array(group_a, ndim=1, name="group_a")
    b = check_array(group_b, ndim=1, name="group_b")
    if a.size == 0 or b.size == 0:
        raise InputValidationError("Mann-Whitney needs two non-empty groups")
    n1, n2 = a.size, b.size
    n = n1 + n2
    ranks = midranks(np.concatenate([a, b]))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    u_min = min(u, n1 * n2 - u)

    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = float(np.sum(counts**3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    dev = abs(u - n1 * n2 / 2.0) - 0.5
    if var <= 0 or dev <= 0:
        p = 1.0
    else:
        p = min(1.0, math.erfc(dev / math.sqrt(var) / math.sqrt(2.0)))
    return MannWhitneyResult(u, u_min, p, min(n1, n2) < 8)


def stratified_kfold(labels, k=5, seed=0):
    """Seeded stratified split into ``k`` folds; returns a list of index arrays.

    Each class is shuffled and dealt round-robin; the deal for the next class
    resumes at the fold after the last one served, keeping fold sizes within one.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise InputValidationError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    start = 0
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise InputValidationError(f"class {cls!r} has {idx.size} members, fewer than k={k}")
        idx = idx[rng.permutation(idx.size)]
        for j, i in enumerate(idx):
            folds[(start + j) % k].append(int(i))
        start = (start + idx.size) % k
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def aggregate_folds(reports):
    reports = list(reports)
    if len(reports) < 2:
        raise InputValidationError("aggregate_folds needs >= 2 reports")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1))}
    return out
