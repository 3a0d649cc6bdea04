"""
Risk estimation and convergence-rate diagnostics.
Misclassification and excess risk, drift estimation error, Student-t
confidence intervals, theoretical rate curves and empirical slope fits.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import betainc

from classify import predict_labels
from sde import LabeledDataset

logger = logging.getLogger(__name__)

ALL = "all"


class MetricsError(ValueError):
    """Raised for empty selections and too few repetitions."""


@dataclass
class RiskEstimate:
    """Empirical misclassification risk with its confusion matrix (rows: true, columns: predicted)."""

    error_rate: float
    n_test: int
    confusion: np.ndarray

    def __post_init__(self):
        if int(self.confusion.sum()) != self.n_test:
            raise MetricsError("confusion counts do not sum to n_test")


@dataclass
class RateCurvePoint:
    N: int
    mean_excess: float
    ci_lower: float
    ci_upper: float
    n_reps: int


def misclassification_risk(classifier, test: LabeledDataset) -> RiskEstimate:
    """
    Fraction of misclassified test paths.

    Args:
        classifier: PlugInClassifier, DirectClassifier, or any callable Trajectory -> label
        test: Labeled test set

    Returns:
        RiskEstimate with a K x K confusion matrix
    """
    if test.N == 0:
        raise MetricsError("empty test set")
    labels, predicted = predict_labels(classifier, test)
    K = max(test.K, int(predicted.max()))
    confusion = np.zeros((K, K), dtype=int)
    np.add.at(confusion, (labels - 1, predicted - 1), 1)
    error_rate = 1.0 - np.trace(confusion) / labels.size
    return RiskEstimate(error_rate=float(error_rate), n_test=int(labels.size), confusion=confusion)


def excess_risk(empirical: RiskEstimate, bayes: Union[RiskEstimate, float]) -> float:
    """R(g) - R(g*); not clamped at zero."""
    bayes_rate = bayes.error_rate if isinstance(bayes, RiskEstimate) else float(bayes)
    return empirical.error_rate - bayes_rate


def estimation_error(estimator: Callable, truth: Callable, paths: LabeledDataset,
                     condition: Union[str, int] = ALL) -> float:
    """
    Mean over selected paths of (1/M) sum_m |b_hat(X_m) - b(X_m)|^2.

    Args:
        estimator: Drift evaluator under test
        truth: Reference drift evaluator
        paths: Independent paths
        condition: "all", or a class label j to restrict to class-j paths

    Returns:
        Estimation error
    """
    if condition == ALL:
        states, _ = paths.stacked()
    else:
        if not 1 <= int(condition) <= paths.K:
            raise MetricsError(f"unknown class {condition!r}")
        states = paths.paths[int(condition) - 1]
    if states.shape[0] == 0:
        raise MetricsError(f"no paths under condition {condition!r}")
    X = states[:, :-1, :]
    diff = np.asarray(estimator(X), dtype=float) - np.asarray(truth(X), dtype=float)
    per_path = np.mean(np.sum(diff * diff, axis=-1), axis=1)
    return float(np.mean(per_path))


def write_confusion(risk: RiskEstimate, path: Union[str, Path], config_hash: Optional[str] = None) -> str:
    """Confusion matrix as (true, predicted, count) rows."""
    K = risk.confusion.shape[0]
    frame = pd.DataFrame(
        [(i + 1, j + 1, int(risk.confusion[i, j])) for i in range(K) for j in range(K)],
        columns=["true", "predicted", "count"],
    )
    if config_hash is not None:
        frame["config_hash"] = config_hash
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return str(path)


# ---------------------------------------------------------------------------
# Student-t intervals
# ---------------------------------------------------------------------------

def t_cdf(t: float, df: float) -> float:
    """Student-t CDF through the regularized incomplete beta function."""
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t >= 0 else tail


def t_quantile(q: float, df: float, tol: float = 1e-10) -> float:
    """
    Invert the Student-t CDF by bisection.

    Args:
        q: Probability in (0, 1)
        df: Degrees of freedom
        tol: Bracket width at which bisection stops

    Returns:
        t with t_cdf(t, df) = q
    """
    if not 0.0 < q < 1.0:
        raise MetricsError(f"quantile level must lie in (0, 1), got {q}")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -t_quantile(1.0 - q, df, tol)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < q:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def confidence_interval(values: Sequence[float], level: float = 0.95) -> Tuple[float, float, float]:
    """
    mean +/- t_{1 - alpha/2}^{(n-1)} * sample std / sqrt(n)

    Returns:
        (mean, lower, upper)
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        raise MetricsError(f"need at least 2 repetitions, got {n}")
    mean = float(np.mean(values))
    tau = float(np.std(values, ddof=1)) / math.sqrt(n)
    half_width = t_quantile(1.0 - (1.0 - level) / 2.0, n - 1) * tau
    return mean, mean - half_width, mean + half_width


# ---------------------------------------------------------------------------
# Rates
# ---------------------------------------------------------------------------

def phi_rate(q: int, betas: Sequence[float], ts: Sequence[float], N: float) -> float:
    """
    phi_N = max_i N^{-2 beta_i^* / (2 beta_i^* + t_i)}, beta_i^* = beta_i prod_{l > i} min(beta_l, 1)
    """
    if len(betas) != q + 1 or len(ts) != q + 1:
        raise MetricsError(f"need q + 1 = {q + 1} betas and ts, got {len(betas)} and {len(ts)}")
    if min(betas) <= 0 or min(ts) <= 0:
        raise MetricsError("betas and ts must be positive")
    rates = []
    for i in range(q + 1):
        beta_star = betas[i] * math.prod(min(b, 1.0) for b in betas[i + 1:])
        rates.append(N ** (-2.0 * beta_star / (2.0 * beta_star + ts[i])))
    return max(rates)


def reference_curve(Ns: Sequence[float], log_power: float, anchor: Tuple[float, float],
                    exponent: float = -0.5) -> np.ndarray:
    """
    c * N^exponent * (log2 N)^log_power through the anchor point (N_0, value_0).
    """
    Ns = np.asarray(Ns, dtype=float)
    shape = Ns ** exponent * np.log2(Ns) ** log_power
    N0, v0 = anchor
    c = v0 / (N0 ** exponent * math.log2(N0) ** log_power)
    return c * shape


def fit_rate(points: Sequence[RateCurvePoint], window: Optional[Union[slice, Tuple[int, int]]] = None) -> float:
    """
    OLS slope of log2(mean excess) on log2(N).

    Args:
        points: Rate curve points
        window: Index range (slice or (start, stop)) of points to use

    Returns:
        Fitted slope
    """
    if window is not None and not isinstance(window, slice):
        window = slice(*window)
    selected = list(points[window] if window is not None else points)
    usable = [p for p in selected if p.mean_excess > 0]
    excluded = len(selected) - len(usable)
    if excluded:
        logger.warning(f"Excluded {excluded} nonpositive excess value(s) from the rate fit")
    if len(usable) < 2:
        raise MetricsError("need at least two positive points to fit a rate")
    x = np.log2([p.N for p in usable])
    y = np.log2([p.mean_excess for p in usable])
    return float(np.polyfit(x, y, 1)[0])
