"""Vulnerability: logistic rate parameter of group-minus-overall metric gaps.

The fit maximises the Bernoulli log-likelihood of a two-parameter
logistic curve ``f(x) = 1 / (1 + exp(-alpha - beta * x))`` with a small
ridge penalty. Responses need not be 0/1 (or even inside [0, 1]); the
objective is then a quasi-likelihood whose Hessian does not depend on y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .classifier import sigmoid
from .stats import spearman

NU_RIDGE = 1e-6
GRAD_TOL = 1e-10
MAX_ITER = 200
MAX_HALVINGS = 60


class DegenerateDesignError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class LogisticFit:
    alpha: float
    beta: float
    converged: bool
    iterations: int
    final_gradient_norm: float

    def __call__(self, x):
        return sigmoid(self.alpha + self.beta * np.asarray(x, dtype=float))


def quasi_log_likelihood(theta, x, y, ridge: float = 0.0) -> float:
    eta = theta[0] + theta[1] * x
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * ridge * (theta @ theta))


def gradient(theta, x, y, ridge: float = 0.0) -> np.ndarray:
    r = y - sigmoid(theta[0] + theta[1] * x)
    return np.array([r.sum(), (r * x).sum()]) - ridge * theta


def hessian(theta, x, ridge: float = 0.0) -> np.ndarray:
    f = sigmoid(theta[0] + theta[1] * x)
    w = f * (1 - f)
    return -np.array([[w.sum(), (w * x).sum()], [(w * x).sum(), (w * x * x).sum()]]) - ridge * np.eye(2)


def quasi_logistic_mle(x, y, ridge: float = NU_RIDGE) -> LogisticFit:
    """Newton-Raphson with step halving, from (0, 0)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("x and y must be 1-D of equal length >= 2")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("non-finite inputs")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if np.unique(x).size < 2:
        raise DegenerateDesignError("x needs at least two distinct values")

    theta = np.zeros(2)
    obj = quasi_log_likelihood(theta, x, y, ridge)
    g = gradient(theta, x, y, ridge)
    gn = np.linalg.norm(g)
    it = 0
    while gn > GRAD_TOL and it < MAX_ITER:
        it += 1
        step = np.linalg.solve(hessian(theta, x, ridge), -g)
        t = 1.0
        # near the optimum the objective stops changing at float resolution,
        # so a step that keeps it level and shrinks the gradient is accepted too
        slack = 8 * np.finfo(float).eps * max(1.0, abs(obj))
        for _ in range(MAX_HALVINGS):
            cand = theta + t * step
            cand_obj = quasi_log_likelihood(cand, x, y, ridge)
            if cand_obj > obj:
                break
            if cand_obj >= obj - slack:
                cand_g = gradient(cand, x, y, ridge)
                if np.linalg.norm(cand_g) < gn:
                    break
            t *= 0.5
        else:
            break  # no ascent possible at float resolution
        if np.array_equal(cand, theta):
            break
        theta, obj = cand, cand_obj
        g = gradient(theta, x, y, ridge)
        gn = np.linalg.norm(g)
    gn = float(np.linalg.norm(g))
    return LogisticFit(float(theta[0]), float(theta[1]), gn <= GRAD_TOL, it, gn)


@dataclass(frozen=True)
class MetricSeries:
    """Fold-level observations of one group's metric and the overall metric.

    Arrays are aligned; undefined metric values are NaN.
    """

    rates: np.ndarray
    folds: np.ndarray
    group: np.ndarray
    overall: np.ndarray

    @classmethod
    def from_points(cls, points) -> MetricSeries:
        """``points``: iterable of (rate, fold, group_value, overall_value)."""
        pts = list(points)
        arr = lambda j: np.array([np.nan if p[j] is None else p[j] for p in pts], dtype=float)  # noqa: E731
        return cls(arr(0), arr(1), arr(2), arr(3))

    @property
    def difference(self) -> np.ndarray:
        return self.group - self.overall

    def defined(self) -> np.ndarray:
        return ~(np.isnan(self.group) | np.isnan(self.overall))


def rescale_difference(d, mode: str = "affine"):
    """Map metric differences into the logistic response range.

    ``"affine"`` sends [-1, 1] onto [0, 1] via (d + 1) / 2, which puts
    "no difference" at the curve's midpoint; ``"none"`` fits raw values.
    """
    if mode == "affine":
        return (np.asarray(d, dtype=float) + 1.0) / 2.0
    if mode == "none":
        return np.asarray(d, dtype=float)
    raise ValueError(f"unknown rescale mode {mode!r}")


def difference_points(series: MetricSeries, use_fold_means: bool = False):
    ok = series.defined()
    x = series.rates[ok]
    d = series.difference[ok]
    if use_fold_means:
        ux = np.unique(x)
        d = np.array([d[x == r].mean() for r in ux])
        x = ux
    return x, d


def vulnerability_nu(series: MetricSeries, ridge: float = NU_RIDGE, rescale: str = "affine",
                     use_fold_means: bool = False) -> tuple[float, LogisticFit, int]:
    """Return (nu, fit, point_count) for one group's series.

    nu > 0: the group's metric rises relative to the overall model as the
    injected rate grows (degradation for FNR/FOR).
    """
    x, d = difference_points(series, use_fold_means)
    if np.unique(x).size < 2:
        raise InsufficientDataError("need defined metrics at two or more rates")
    fit = quasi_logistic_mle(x, rescale_difference(d, rescale), ridge)
    return fit.beta, fit, int(x.size)


def alt_metric_1(series: MetricSeries, ridge: float = NU_RIDGE) -> float:
    """|beta_group - beta_overall| from separate fits of each raw metric curve."""
    ok = series.defined()
    x = series.rates[ok]
    if np.unique(x).size < 2:
        raise InsufficientDataError("need defined metrics at two or more rates")
    bg = quasi_logistic_mle(x, series.group[ok], ridge).beta
    bo = quasi_logistic_mle(x, series.overall[ok], ridge).beta
    return abs(bg - bo)


def rate_of_change_points(series: MetricSeries):
    """Per-fold finite differences of the gap over the ascending rate grid.

    Returns (midpoint rates, slopes). Undefined points are dropped before
    differencing, so a slope may span a gap in the grid.
    """
    ok = series.defined()
    xs, ys = [], []
    for fold in np.unique(series.folds[ok]):
        m = ok & (series.folds == fold)
        r = series.rates[m]
        d = series.difference[m]
        order = np.argsort(r, kind="stable")
        r, d = r[order], d[order]
        if r.size < 2:
            continue
        xs.append((r[:-1] + r[1:]) / 2)
        ys.append(np.diff(d) / np.diff(r))
    if not xs:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(xs), np.concatenate(ys)


def alt_metric_2(series: MetricSeries, ridge: float = NU_RIDGE) -> float:
    """Logistic rate parameter of the gap's rate of change.

    Slopes are unbounded, so they are mapped into [0.25, 0.75] by
    0.5 + s / (4 max|s|) before fitting; a constant slope then has an
    interior optimum with beta = 0.
    """
    if np.unique(series.rates[series.defined()]).size < 3:
        raise InsufficientDataError("rate-of-change metric needs three or more rates")
    x, s = rate_of_change_points(series)
    if np.unique(x).size < 2:
        raise InsufficientDataError("rate-of-change metric needs three or more rates")
    scale = np.abs(s).max()
    y = 0.5 + (s / (4 * scale) if scale > 0 else 0.0 * s)
    return quasi_logistic_mle(x, y, ridge).beta


@dataclass(frozen=True)
class VulnerabilityReport:
    target: str
    observed_group: str
    metric: str
    test_set: str
    trainer: str
    nu: float | None
    alpha: float | None = None
    alt_metric_1: float | None = None
    alt_metric_2: float | None = None
    point_count: int = 0
    converged: bool = False
    note: str = ""

    @property
    def on_diagonal(self) -> bool:
        return self.target == self.observed_group

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def build_report(series: MetricSeries, *, target: str, observed_group: str, metric: str,
                 test_set: str, trainer: str, ridge: float = NU_RIDGE, rescale: str = "affine",
                 use_fold_means: bool = False) -> VulnerabilityReport:
    """All vulnerability measures for one (target, group, metric, test set).

    Insufficient data yields a report with ``nu=None`` and a note rather
    than an exception, so a full matrix can always be assembled.
    """
    tags = dict(target=target, observed_group=observed_group, metric=metric, test_set=test_set, trainer=trainer)
    try:
        nu, fit, n = vulnerability_nu(series, ridge, rescale, use_fold_means)
    except InsufficientDataError as exc:
        return VulnerabilityReport(nu=None, note=str(exc), **tags)
    a1 = alt_metric_1(series, ridge)
    try:
        a2 = alt_metric_2(series, ridge)
    except InsufficientDataError:
        a2 = None
    return VulnerabilityReport(nu=nu, alpha=fit.alpha, alt_metric_1=a1, alt_metric_2=a2,
                               point_count=n, converged=fit.converged, **tags)


def vulnerability_vs_size(reports, train_sizes: dict, measure: str = "nu") -> tuple[float, float]:
    """Spearman correlation of on-diagonal vulnerability with training-set size.

    ``train_sizes`` maps group label to its training sample count;
    ``measure`` picks the report field ("nu", "alt_metric_1", "alt_metric_2").
    """
    xs, ys = [], []
    for r in reports:
        v = getattr(r, measure)
        if r.on_diagonal and v is not None and r.target in train_sizes and not math.isnan(v):
            xs.append(v)
            ys.append(train_sizes[r.target])
    if len(xs) < 3:
        raise InsufficientDataError("size correlation needs at least three groups")
    return spearman(xs, ys)
