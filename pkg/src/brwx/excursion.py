"""Reference path laws: Brownian bridge, normalized excursion, Bessel(3), meander.

Grids are uniform with ``G`` points s_i = i/(G-1) on [0, 1].  All samplers
are exact on the grid (Gaussian transition laws), so no discretisation error
enters the grid marginals.  Batch samplers return arrays of shape
``(size, G)``; the single-path samplers wrap them in a :class:`PathGrid`.

The meander is obtained from a three-dimensional Bessel process R by the
weight sqrt(pi/2)/R_1: E[F(M)] = sqrt(pi/2) E[F(R)/R_1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats as sps

SQRT_HALF_PI = math.sqrt(math.pi / 2.0)


@dataclass(frozen=True)
class PathGrid:
    values: np.ndarray
    weight: float = 1.0
    s: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if self.s is None:
            object.__setattr__(self, "s", uniform_grid(len(vals)))

    @property
    def grid_points(self) -> int:
        return len(self.values)

    def at(self, t: float) -> float:
        """Right-continuous lookup: value at the last grid time <= t."""
        i = int(np.searchsorted(self.s, t + 1e-12, side="right")) - 1
        return float(self.values[max(i, 0)])

    def restrict(self, delta: float) -> "PathGrid":
        keep = self.s <= delta + 1e-12
        return PathGrid(self.values[keep], self.weight, self.s[keep])


def uniform_grid(points: int) -> np.ndarray:
    if points < 1:
        raise ValueError("a grid needs at least one point")
    if points == 1:
        return np.zeros(1)
    return np.arange(points) / (points - 1)


def _is_dyadic(intervals: int) -> bool:
    return intervals >= 1 and intervals & (intervals - 1) == 0


def bridges(G: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Standard Brownian bridges on the G-point grid, shape (size, G).

    Dyadic grids are filled by midpoint refinement; other grids by the
    sequential Gaussian transition of the pinned process.
    """
    if G < 2:
        raise ValueError("G must be at least 2")
    n = G - 1
    out = np.zeros((size, G))
    if _is_dyadic(n):
        step = n
        while step > 1:
            half = step // 2
            left = np.arange(0, n, step)
            mid = left + half
            right = left + step
            mean = 0.5 * (out[:, left] + out[:, right])
            sd = math.sqrt(step / n / 4.0)
            out[:, mid] = mean + sd * rng.standard_normal((size, len(mid)))
            step = half
        return out
    s = uniform_grid(G)
    for i in range(1, n):
        ds = s[i] - s[i - 1]
        rest = 1.0 - s[i - 1]
        mean = out[:, i - 1] * (1.0 - s[i]) / rest
        sd = math.sqrt(ds * (1.0 - s[i]) / rest)
        out[:, i] = mean + sd * rng.standard_normal(size)
    return out


def excursions(G: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Normalized Brownian excursions as the modulus of 3 independent bridges."""
    b = bridges(G, 3 * size, rng).reshape(3, size, G)
    e = np.sqrt(np.sum(b * b, axis=0))
    e[:, 0] = 0.0
    e[:, -1] = 0.0
    return e


def bessel3(G: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Three-dimensional Bessel process from 0 on [0, 1]."""
    if G < 2:
        raise ValueError("G must be at least 2")
    dt = 1.0 / (G - 1)
    inc = math.sqrt(dt) * rng.standard_normal((3, size, G - 1))
    w = np.concatenate([np.zeros((3, size, 1)), np.cumsum(inc, axis=2)], axis=2)
    return np.sqrt(np.sum(w * w, axis=0))


def meanders(G: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Bessel(3) paths with their meander weights sqrt(pi/2)/R_1."""
    r = bessel3(G, size, rng)
    return r, SQRT_HALF_PI / r[:, -1]


def sample_excursion(G: int, rng: np.random.Generator) -> PathGrid:
    return PathGrid(excursions(G, 1, rng)[0])


def sample_meander(G: int, rng: np.random.Generator) -> PathGrid:
    r, w = meanders(G, 1, rng)
    return PathGrid(r[0], float(w[0]))


# ---------------------------------------------------------------------------
# marginals


@dataclass(frozen=True)
class ExcursionMarginal:
    s: float
    scale: float

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        v = self.scale**2
        out = 2.0 * x**2 * np.exp(-(x**2) / (2.0 * v)) / math.sqrt(2.0 * math.pi * v**3)
        return np.where(x > 0, out, 0.0)

    def cdf(self, x):
        # e_s is a chi variable with 3 degrees of freedom scaled by sqrt(s(1-s))
        return sps.chi.cdf(np.asarray(x, dtype=float), 3, scale=self.scale)

    @property
    def mean(self) -> float:
        return 4.0 * self.scale / math.sqrt(2.0 * math.pi)


def excursion_marginal(s: float) -> ExcursionMarginal:
    if not 0.0 < s < 1.0:
        raise ValueError("s must lie strictly inside (0, 1)")
    return ExcursionMarginal(s, math.sqrt(s * (1.0 - s)))


# ---------------------------------------------------------------------------
# the meander / excursion identity

# A functional maps (times, values) with values of shape (size, points) to
# an array of shape (size,) with entries in [0, 1].
Functional = Callable[[np.ndarray, np.ndarray], np.ndarray]


def psi(x):
    x = np.asarray(x, dtype=float)
    return x * np.exp(-0.5 * x * x)


def const_one(times, values):
    return np.ones(values.shape[0])


def value_at(t: float, fn: Callable[[np.ndarray], np.ndarray]) -> Functional:
    """Functional fn(path(t)) with right-continuous lookup on the grid."""

    def F(times, values):
        i = int(np.searchsorted(times, t + 1e-12, side="right")) - 1
        return fn(values[:, max(i, 0)])

    return F


@dataclass(frozen=True)
class IdentityCheck:
    delta: float
    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)

    def agrees(self, k: float = 3.0) -> bool:
        return self.gap <= k * (self.se_lhs + self.se_rhs)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


def _blocks(total: int, block: int):
    for lo in range(0, total, block):
        yield min(block, total - lo)


def meander_excursion_identity(
    delta: float,
    F: Functional,
    samples: int,
    rng: np.random.Generator,
    G: int = 257,
    block: int = 4096,
) -> IdentityCheck:
    """Both sides of

        E[F(sqrt(D) M_{s/D}; s <= D) psi(sqrt(D) M_1 / sqrt(1-D))] / ((1-D) sqrt(D))
            = sqrt(pi/2) E[F(e_s; s <= D)].

    The left side uses weighted Bessel(3) samples for the meander, the right
    side excursion samples on ``G`` points.  Delta times (G-1) must be an
    integer so both sides see the same time grid on [0, delta].  Samples are
    drawn in blocks to bound memory.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if samples < 2:
        raise ValueError("need at least two samples")
    D = round(delta * (G - 1))
    if D < 1 or abs(D - delta * (G - 1)) > 1e-9:
        raise ValueError("delta * (G - 1) must be a positive integer")
    times = np.arange(D + 1) / (G - 1)
    left, right = [], []
    for size in _blocks(samples, block):
        r, w = meanders(D + 1, size, rng)
        scaled = math.sqrt(delta) * r
        left.append(w * F(times, scaled) * psi(scaled[:, -1] / math.sqrt(1.0 - delta))
                    / ((1.0 - delta) * math.sqrt(delta)))
    for size in _blocks(samples, block):
        e = excursions(G, size, rng)[:, : D + 1]
        right.append(SQRT_HALF_PI * F(times, e))
    lhs, se_l = _mean_se(np.concatenate(left))
    rhs, se_r = _mean_se(np.concatenate(right))
    return IdentityCheck(delta, lhs, rhs, se_l, se_r)


def excursion_values(s_points, samples: int, rng: np.random.Generator, G: int = 257, block: int = 4096) -> np.ndarray:
    """Excursion values at the grid times s_points, shape (samples, len(s_points))."""
    grid = uniform_grid(G)
    idx = [int(round(s * (G - 1))) for s in s_points]
    for s, i in zip(s_points, idx):
        if abs(grid[i] - s) > 1e-12:
            raise ValueError(f"s={s} is not a point of the {G}-point grid")
    out = [excursions(G, size, rng)[:, idx] for size in _blocks(samples, block)]
    return np.concatenate(out)


def bessel_restriction(delta: float, samples: int, rng: np.random.Generator, G: int = 257):
    """Bessel(3) paths on [0, delta] with the bridge density as weights.

    Returns ``(times, values, weights)``; the weighted law of the values is
    the excursion restricted to [0, delta].
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    D = round(delta * (G - 1))
    if abs(D - delta * (G - 1)) > 1e-9:
        raise ValueError("delta * (G - 1) must be an integer")
    # Bessel(3) on [0, delta] sampled on the fine grid of spacing 1/(G-1)
    r = math.sqrt(delta) * bessel3(D + 1, samples, rng)
    weights = (1.0 - delta) ** -1.5 * np.exp(-r[:, -1] ** 2 / (2.0 * (1.0 - delta)))
    return np.arange(D + 1) / (G - 1), r, weights
