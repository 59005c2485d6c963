"""t-tests, Benjamini-Hochberg, crossover detection and Spearman correlation.

The Student-t distribution is evaluated here through the regularised
incomplete beta function (Lentz continued fraction), so p-values do not
depend on an external statistics package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

_CF_TOL = 1e-16
_CF_MAX_ITER = 10_000
_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = _TINY if abs(d) < _TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|)."""
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def t_cdf(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


def t_ppf(p: float, df: float) -> float:
    """Quantile of Student t by bracketing and bisection on :func:`t_cdf`."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if p == 0.5:
        return 0.0
    from scipy.optimize import brentq

    hi = 1.0
    while t_cdf(hi, df) < max(p, 1 - p):
        hi *= 2.0
    q = brentq(lambda x: t_cdf(x, df) - max(p, 1 - p), 0.0, hi, xtol=1e-14, rtol=1e-15, maxiter=500)
    return q if p > 0.5 else -q


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    df: float
    kind: str  # "welch", "pooled" or "paired"

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def _degenerate(mean_diff: float, df: float, kind: str) -> TestResult:
    # zero variance: equal means -> p = 1, otherwise separation -> p = 0
    if mean_diff == 0:
        return TestResult(0.0, 1.0, df, kind)
    return TestResult(math.copysign(math.inf, mean_diff), 0.0, df, kind)


def independent_t(a, b, equal_var: bool = False) -> TestResult:
    """Two-sided two-sample t-test; Welch-Satterthwaite df unless ``equal_var``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if equal_var:
        df = na + nb - 2.0
        sp = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = sp * (1 / na + 1 / nb)
        kind = "pooled"
    else:
        u, v = va / na, vb / nb
        se2 = u + v
        kind = "welch"
        if se2 > 0:
            # scaled so tiny variances cannot underflow to 0/0
            u, v = u / max(u, v), v / max(u, v)
            df = (u + v) ** 2 / (u * u / (na - 1) + v * v / (nb - 1))
        else:
            df = na + nb - 2.0
    if se2 == 0:
        return _degenerate(diff, df, kind)
    t = diff / math.sqrt(se2)
    return TestResult(float(t), min(1.0, t_sf2(t, df)), float(df), kind)


def paired_t(a, b) -> TestResult:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    if a.size < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    n = d.size
    df = n - 1.0
    sd = d.std(ddof=1)
    if sd == 0:
        return _degenerate(d.mean(), df, "paired")
    t = d.mean() / (sd / math.sqrt(n))
    return TestResult(float(t), min(1.0, t_sf2(t, df)), df, "paired")


def benjamini_hochberg(p_values, q: float = 0.05) -> np.ndarray:
    """Step-up BH reject flags, in input order."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    if ((p < 0) | (p > 1) | np.isnan(p)).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    passed = np.flatnonzero(p[order] <= q * np.arange(1, m + 1) / m)
    reject = np.zeros(m, dtype=bool)
    if passed.size:
        reject[order[: passed[-1] + 1]] = True
    return reject


@dataclass(frozen=True)
class CrossoverInterval:
    rate_low: float
    rate_high: float
    delta_low: float
    delta_high: float
    metric: str = ""
    group: str = ""

    @property
    def degenerate(self) -> bool:
        return self.delta_low == 0 or self.delta_high == 0


def detect_crossovers(differences, rates, metric: str = "", group: str = "") -> list[CrossoverInterval]:
    """Adjacent (defined) rate pairs where the mean difference changes side.

    Zero counts as the non-negative side, so -0.1 -> 0.0 is a crossover;
    intervals with an exact-zero endpoint are marked ``degenerate``.
    Undefined (None/NaN) means are skipped and the pair spans the gap.
    """
    pts = [(float(r), float(d)) for r, d in zip(rates, differences)
           if d is not None and not math.isnan(d)]
    out = []
    for (r0, d0), (r1, d1) in zip(pts, pts[1:]):
        if (d0 < 0) != (d1 < 0):
            out.append(CrossoverInterval(r0, r1, d0, d1, metric, group))
    return out


def spearman(x, y) -> tuple[float, float]:
    """Spearman r_s (average ranks) and two-sided p from the t approximation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size:
        raise ValueError("x and y differ in length")
    n = x.size
    if n < 3:
        raise ValueError("Spearman correlation needs at least three points")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return math.nan, math.nan
    rs = float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))
    if abs(rs) == 1.0:
        return rs, 0.0
    t = rs * math.sqrt((n - 2) / (1 - rs * rs))
    return rs, t_sf2(t, n - 2)
