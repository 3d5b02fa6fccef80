"""Kaplan-Meier curves, median survival and the two-group log-rank test."""

import enum
import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import NamedTuple, Optional

import numpy as np

from ._validation import check_array
from .exceptions import DegenerateStatisticsError, InputValidationError


class CensoringMode(str, enum.Enum):
    # right-censored records stay in the risk sets
    STANDARD = "standard"
    # censored records are dropped before estimation
    PAPER_REPLICA = "paper_replica"


class CIMethod(str, enum.Enum):
    LOGLOG = "loglog"
    PLAIN = "plain"


@dataclass(frozen=True)
class SurvivalRecord:
    sample_id: str
    time: float
    event: int
    group: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time > 0):
            raise InputValidationError(f"{self.sample_id}: time must be finite and > 0")
        if self.event not in (0, 1):
            raise InputValidationError(f"{self.sample_id}: event must be 0 or 1")


@dataclass(frozen=True)
class KMCurve:
    """Product-limit estimate evaluated at the distinct event times."""

    times: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray
    survival: np.ndarray
    variance: np.ndarray  # Greenwood
    ci_low: np.ndarray
    ci_high: np.ndarray
    n: int

    def at(self, t):
        """S(t) of the right-continuous step function."""
        i = np.searchsorted(self.times, t, side="right")
        return 1.0 if i == 0 else float(self.survival[i - 1])

    def rows(self):
        return zip(self.times, self.n_at_risk, self.survival, self.ci_low, self.ci_high)


def _arrays(records, mode):
    mode = CensoringMode(mode)
    records = list(records)
    if mode is CensoringMode.PAPER_REPLICA:
        records = [r for r in records if r.event == 1]
    if not records:
        raise InputValidationError("no survival records left after filtering")
    t = check_array([r.time for r in records], ndim=1, name="time")
    e = np.array([r.event for r in records], dtype=np.int64)
    return t, e


def _risk_table(t, e, grid):
    """Numbers at risk and deaths at each time in ``grid``."""
    n = np.array([(t >= u).sum() for u in grid], dtype=np.int64)
    d = np.array([((t == u) & (e == 1)).sum() for u in grid], dtype=np.int64)
    return n, d


def km_estimate(records, censoring_mode=CensoringMode.STANDARD, ci=CIMethod.LOGLOG, alpha=0.05):
    t, e = _arrays(records, censoring_mode)
    times = np.unique(t[e == 1])
    n, d = _risk_table(t, e, times)
    surv = np.cumprod(1.0 - d / n)

    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n > d, d / (n * (n - d)), np.inf)
    green = np.cumsum(terms)
    z = NormalDist().inv_cdf(1.0 - alpha / 2.0)

    var = np.zeros_like(surv)
    low = np.zeros_like(surv)
    high = np.zeros_like(surv)
    pos = surv > 0
    var[pos] = surv[pos] ** 2 * green[pos]
    if CIMethod(ci) is CIMethod.LOGLOG:
        log_s = np.log(surv[pos])
        se = np.sqrt(green[pos]) / np.abs(log_s)
        low[pos] = surv[pos] ** np.exp(z * se)
        high[pos] = surv[pos] ** np.exp(-z * se)
    else:
        half = z * np.sqrt(var[pos])
        low[pos] = np.clip(surv[pos] - half, 0.0, 1.0)
        high[pos] = np.clip(surv[pos] + half, 0.0, 1.0)
    return KMCurve(times, n, d, surv, var, low, high, int(t.size))


class MedianSurvival(NamedTuple):
    median: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]


def _first_at_or_below(times, values, level=0.5):
    idx = np.flatnonzero(values <= level)
    return float(times[idx[0]]) if idx.size else None


def median_survival(curve):
    """Median and envelope-crossing CI; ``None`` marks a bound that is not reached."""
    return MedianSurvival(
        _first_at_or_below(curve.times, curve.survival),
        _first_at_or_below(curve.times, curve.ci_low),
        _first_at_or_below(curve.times, curve.ci_high),
    )


# Chebyshev-fitted erfc, fractional error below 1.2e-7 everywhere
_ERFC_COEF = (
    -1.26551223, 1.00002368, 0.37409196, 0.09678418, -0.18628806,
    0.27886807, -1.13520398, 1.48851587, -0.82215223, 0.17087277,
)


def erfc_approx(x):
    z = abs(x)
    t = 1.0 / (1.0 + 0.5 * z)
    poly = 0.0
    for c in reversed(_ERFC_COEF[1:]):
        poly = t * (c + poly)
    ans = t * math.exp(-z * z + _ERFC_COEF[0] + poly)
    return ans if x >= 0 else 2.0 - ans


def chi2_1df_pvalue(x):
    """Upper tail of the 1-df chi-square distribution."""
    if not math.isfinite(x) or x < 0:
        raise InputValidationError(f"chi-square statistic must be finite and >= 0, got {x}")
    if x == 0:
        return 1.0
    return min(1.0, erfc_approx(math.sqrt(x / 2.0)))


class LogRankResult(NamedTuple):
    chi2: float
    pvalue: float
    observed_a: float
    expected_a: float
    variance: float


def logrank_test(group_a, group_b, censoring_mode=CensoringMode.STANDARD):
    ta, ea = _arrays(group_a, censoring_mode)
    tb, eb = _arrays(group_b, censoring_mode)
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    times = np.unique(t[e == 1])
    if times.size == 0:
        raise DegenerateStatisticsError("log-rank test needs at least one event")
    n_a, d_a = _risk_table(ta, ea, times)
    n, d = _risk_table(t, e, times)
    expected = d * n_a / n
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(n > 1, d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1), 0.0)
    obs, exp_, var = float(d_a.sum()), float(expected.sum()), float(v.sum())
    if var <= 0:
        raise DegenerateStatisticsError("log-rank variance is zero")
    chi2 = (obs - exp_) ** 2 / var
    return LogRankResult(chi2, chi2_1df_pvalue(chi2), obs, exp_, var)
