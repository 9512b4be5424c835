"""Estimation and goodness-of-fit helpers shared by the experiments.

Every routine sorts its input first and sums with ``math.fsum``, so results
do not depend on the order of the data.  KS p-values use the asymptotic
Kolmogorov distribution; weighted samples enter through their Kish
effective size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps
from scipy.special import kolmogorov


@dataclass(frozen=True, eq=False)
class EmpiricalSample:
    values: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if self.weights is None:
            w = None
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != v.shape:
                raise ValueError("weights must match values")
            if np.any(~(w > 0)):
                raise ValueError("weights must be positive")
        order = np.argsort(v, kind="stable")
        object.__setattr__(self, "values", v[order])
        object.__setattr__(self, "weights", None if w is None else w[order])

    def __len__(self) -> int:
        return len(self.values)

    @property
    def w(self) -> np.ndarray:
        return np.ones(len(self.values)) if self.weights is None else self.weights

    @property
    def n_eff(self) -> float:
        w = self.w
        return math.fsum(w.tolist()) ** 2 / math.fsum((w * w).tolist())

    def ecdf(self, x) -> np.ndarray:
        """Weighted empirical CDF at x (right-continuous)."""
        w = self.w
        cum = np.concatenate([[0.0], np.cumsum(w)])
        idx = np.searchsorted(self.values, np.asarray(x, dtype=float), side="right")
        return cum[idx] / cum[-1]


def _sample(a) -> EmpiricalSample:
    return a if isinstance(a, EmpiricalSample) else EmpiricalSample(a)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float


def ks_two_sample(a, b) -> TestResult:
    """Two-sample Kolmogorov-Smirnov statistic with an asymptotic p-value."""
    a, b = _sample(a), _sample(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("KS test needs non-empty samples")
    grid = np.concatenate([a.values, b.values])
    d = float(np.max(np.abs(a.ecdf(grid) - b.ecdf(grid))))
    n1, n2 = a.n_eff, b.n_eff
    en = math.sqrt(n1 * n2 / (n1 + n2))
    return TestResult(d, float(kolmogorov(en * d)))


def ks_one_sample(a, cdf) -> TestResult:
    """One-sample KS statistic of ``a`` against a continuous ``cdf``."""
    a = _sample(a)
    n = len(a)
    if n == 0:
        raise ValueError("KS test needs a non-empty sample")
    F = np.asarray(cdf(a.values), dtype=float)
    w = a.w
    cum = np.cumsum(w) / math.fsum(w.tolist())
    before = np.concatenate([[0.0], cum[:-1]])
    d = float(max(np.max(cum - F), np.max(F - before)))
    return TestResult(d, float(kolmogorov(math.sqrt(a.n_eff) * d)))


def weighted_mean(x, w=None) -> float:
    x = np.asarray(x, dtype=float)
    if w is None:
        return math.fsum(np.sort(x).tolist()) / len(x)
    s = EmpiricalSample(x, w)
    return math.fsum((s.values * s.weights).tolist()) / math.fsum(s.weights.tolist())


def mean_se(x, w=None) -> tuple[float, float]:
    """Mean and standard error; weighted version uses n/(n-1) sum w^2 (x-m)^2 / (sum w)^2."""
    s = EmpiricalSample(x, w)
    n = len(s)
    if n == 0:
        raise ValueError("empty sample")
    wt = s.w
    tot = math.fsum(wt.tolist())
    m = math.fsum((wt * s.values).tolist()) / tot
    if n == 1:
        return m, math.inf
    var = n / (n - 1) * math.fsum((wt * wt * (s.values - m) ** 2).tolist()) / tot**2
    return m, math.sqrt(var)


def mean_ci(a, level: float = 0.95, weights=None) -> tuple[float, float]:
    """(mean, half-width) of a normal-approximation confidence interval."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    m, se = mean_se(a, weights)
    z = float(sps.norm.ppf(0.5 + level / 2.0))
    return m, z * se


def mean_jackknife(x) -> tuple[float, float]:
    """Mean with its leave-one-out jackknife standard error."""
    x = np.sort(np.asarray(x, dtype=float))
    n = len(x)
    if n == 0:
        raise ValueError("empty sample")
    total = math.fsum(x.tolist())
    mean = total / n
    if n == 1:
        return mean, math.inf
    loo = (total - x) / (n - 1)
    se = math.sqrt((n - 1) / n * math.fsum(((loo - mean) ** 2).tolist()))
    return mean, se


@dataclass(frozen=True)
class ChiSquare:
    statistic: float
    dof: int
    pvalue: float


def chi_square_uniform(counts) -> ChiSquare:
    """Pearson chi-square test of equal cell probabilities."""
    c = np.sort(np.asarray(counts, dtype=float))
    if len(c) < 2:
        raise ValueError("chi-square test needs at least two categories")
    if np.any(c < 0):
        raise ValueError("counts must be non-negative")
    total = math.fsum(c.tolist())
    if total <= 0:
        raise ValueError("no observations")
    expected = total / len(c)
    stat = math.fsum(((c - expected) ** 2 / expected).tolist())
    dof = len(c) - 1
    p = 1.0 if stat == 0.0 else float(sps.chi2.sf(stat, dof))
    return ChiSquare(stat, dof, p)
