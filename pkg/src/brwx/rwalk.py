"""The centred random walk attached to a boundary-case law.

Its step law is P(S_1 in dx) = E[sum_u 1{V(u) in dx} e^{-V(u)}].  For
lattice step laws the renewal function, stay-positive probabilities and the
ballot-type probabilities are computed by exact dynamic programming on the
lattice; non-lattice laws fall back to Monte Carlo.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass

import numba as nb
import numpy as np

from .model import (
    LATTICE_TOL,
    LatticeInfo,
    NotBoundaryError,
    OffspringLaw,
    lattice_of_values,
    log_laplace,
)


@dataclass(frozen=True)
class StepLaw:
    values: np.ndarray
    probs: np.ndarray
    lattice: LatticeInfo

    @property
    def mean(self) -> float:
        return math.fsum((self.values * self.probs).tolist())

    @property
    def variance(self) -> float:
        mu = self.mean
        return math.fsum((self.probs * (self.values - mu) ** 2).tolist())

    def as_dict(self) -> dict[float, float]:
        return dict(zip(self.values.tolist(), self.probs.tolist()))

    def coords(self) -> np.ndarray:
        return self.lattice.coords(self.values)

    def unit_steps(self) -> np.ndarray | None:
        """Steps as integer multiples of the lattice unit, when one exists."""
        lat = self.lattice
        if not lat.is_lattice or lat.unit is None:
            return None
        return lat.offset_units + lat.span_units * self.coords()


def make_step_law(values, probs) -> StepLaw:
    values = np.asarray(values, dtype=float)
    probs = np.asarray(probs, dtype=float)
    order = np.argsort(values)
    values, probs = values[order], probs[order]
    if abs(math.fsum(probs.tolist()) - 1.0) > 1e-12:
        raise ValueError("step probabilities must sum to 1")
    return StepLaw(values, probs, lattice_of_values(values))


def step_law(law: OffspringLaw) -> StepLaw:
    """Exact finite step law of the walk in the many-to-one lemma.

    Only psi(1) = 0 is required: it is what makes the tilted measure a
    probability law (the walk is centred when psi'(1) = 0 as well).
    """
    psi1 = log_laplace(law, 1.0)
    if not abs(psi1) <= 1e-10:
        raise NotBoundaryError(f"the many-to-one step law needs psi(1) = 0, got {psi1:.3e}")
    support = law.support()
    masses = []
    for x in support:
        masses.append(law.expect_sum(lambda v, x=x: np.where(np.abs(v - x) <= 1e-15, np.exp(-v), 0.0)))
    probs = np.array(masses)
    probs = probs / math.fsum(probs.tolist())
    return StepLaw(support, probs, lattice_of_values(support))


def negate(step: StepLaw) -> StepLaw:
    return make_step_law(-step.values, step.probs)


def simulate_walk(step: StepLaw, n: int, start: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Positions S_0..S_n (shape (n+1,) or (size, n+1))."""
    shape = (1 if size is None else size, n)
    idx = rng.choice(len(step.values), size=shape, p=step.probs)
    lat = step.lattice
    if lat.is_lattice:
        k = np.cumsum(step.coords()[idx], axis=1)
        steps = np.arange(1, n + 1)
        pos = start + lat.offset * steps + lat.span * k
    else:
        pos = start + np.cumsum(step.values[idx], axis=1)
    out = np.concatenate([np.full((shape[0], 1), float(start)), pos], axis=1)
    return out[0] if size is None else out


# ---------------------------------------------------------------------------
# lattice DP kernels


@nb.njit(cache=True)
def _ladder_kernel(offs, w, kmax, trim):  # pragma: no cover - compiled
    # v[y] is the mass at height y >= 0 above the start that has not yet
    # descended strictly below it; descents are booked into heights[-y]
    mino = offs.min()
    maxo = offs.max()
    nt = offs.shape[0]
    heights = np.zeros(1 - mino)
    cap = 4096
    v = np.zeros(cap)
    out = np.zeros(cap)
    v[0] = 1.0
    length = 1
    lost = 0.0
    for k in range(kmax):
        newlen = length + max(maxo, 0)
        if newlen > v.shape[0]:
            nv = np.zeros(2 * newlen)
            nv[:length] = v[:length]
            v = nv
            out = np.zeros(2 * newlen)
        for y in range(mino, 0):
            s = 0.0
            for t in range(nt):
                j = y - offs[t]
                if 0 <= j < length:
                    s += w[t] * v[j]
            heights[-y] += s
        lo = max(maxo, 0)
        hi = min(newlen, length + mino)
        for y in range(0, min(lo, newlen)):
            s = 0.0
            for t in range(nt):
                j = y - offs[t]
                if 0 <= j < length:
                    s += w[t] * v[j]
            out[y] = s
        if hi > lo:
            o = offs[0]
            p = w[0]
            for y in range(lo, hi):
                out[y] = p * v[y - o]
            for t in range(1, nt):
                o = offs[t]
                p = w[t]
                for y in range(lo, hi):
                    out[y] += p * v[y - o]
        for y in range(max(hi, lo), newlen):
            s = 0.0
            for t in range(nt):
                j = y - offs[t]
                if 0 <= j < length:
                    s += w[t] * v[j]
            out[y] = s
        v, out = out, v
        length = newlen
        if (k & 255) == 255:
            while length > 1 and v[length - 1] < trim:
                lost += v[length - 1]
                v[length - 1] = 0.0
                length -= 1
    rest = 0.0
    for i in range(length):
        rest += v[i]
    return heights, rest, lost


@nb.njit(cache=True)
def _killed_kernel(offs, w, start, lower, n):  # pragma: no cover - compiled
    # coordinates run from base = start + n*min(offs) upward; lower[k] is the
    # smallest coordinate allowed after step k
    mino = offs.min()
    maxo = offs.max()
    base = start + n * mino
    width = n * (maxo - mino) + 1
    v = np.zeros(width)
    tmp = np.zeros(width)
    lo = start - base
    hi = lo
    v[lo] = 1.0 if start >= lower[0] else 0.0
    for k in range(1, n + 1):
        nlo = lo + mino
        nhi = hi + maxo
        for i in range(nlo, nhi + 1):
            tmp[i] = 0.0
        for t in range(offs.shape[0]):
            o = offs[t]
            p = w[t]
            for i in range(lo, hi + 1):
                tmp[i + o] += p * v[i]
        cut = lower[k] - base
        if cut > nlo:
            for i in range(nlo, min(cut, nhi + 1)):
                tmp[i] = 0.0
            nlo = max(nlo, min(cut, nhi))
        for i in range(nlo, nhi + 1):
            v[i] = tmp[i]
        lo = nlo
        hi = nhi
    out = np.zeros(hi - lo + 1)
    for i in range(lo, hi + 1):
        out[i - lo] = v[i]
    return base + lo, out


def ladder_heights(step: StepLaw, k_max: int, trim: float = 1e-18) -> tuple[np.ndarray, float]:
    """Law of the first strict descending ladder height, in lattice units.

    Returns ``(heights, deficit)`` where ``heights[h]`` is the probability
    that the first strict descent happens by step ``k_max`` and lands ``h``
    units below the start; ``deficit`` bounds the missing mass: what is
    still undescended after ``k_max`` steps plus the far upper tail dropped
    by the DP window (entries below ``trim``).
    """
    units = step.unit_steps()
    if units is None:
        raise ValueError("exact ladder DP needs a lattice step law with a rational offset")
    heights, deficit = _ladder_cached(tuple(units.tolist()), tuple(step.probs.tolist()), int(k_max), float(trim))
    return heights.copy(), deficit


@lru_cache(maxsize=16)
def _ladder_cached(units, probs, k_max, trim):
    heights, rest, lost = _ladder_kernel(
        np.array(units, dtype=np.int64), np.array(probs, dtype=np.float64), k_max, trim
    )
    return heights, float(rest + lost)


def renewal_R(
    step: StepLaw,
    x: float,
    k_max: int = 1_000_000,
    mode: str = "dp",
    rng: np.random.Generator | None = None,
    replicas: int = 10_000,
    return_bound: bool = False,
):
    """Renewal function R(x) = sum_k P(-x <= S_k < min_{j<k} S_j), R(0) = 1.

    ``dp`` mode writes R as the renewal measure of the strict descending
    ladder heights, whose law is obtained from the killed-walk DP truncated
    at ``k_max`` steps.  ``mc`` mode counts ladder epochs along simulated
    walks of length ``k_max``.
    """
    if x < 0:
        raise ValueError("renewal function is defined for x >= 0")
    if x == 0:
        return (1.0, 0.0) if return_bound else 1.0
    if mode == "dp":
        heights, deficit = ladder_heights(step, k_max)
        m = int(math.floor(x / step.lattice.unit + LATTICE_TOL))
        u = np.zeros(m + 1)
        u[0] = 1.0
        for y in range(1, m + 1):
            top = min(y, len(heights) - 1)
            u[y] = math.fsum((heights[1 : top + 1] * u[y - 1 :: -1][:top]).tolist())
        value = math.fsum(u.tolist())
        return (value, deficit) if return_bound else value
    if mode == "mc":
        rng = rng if rng is not None else np.random.default_rng(0)
        counts = np.empty(replicas)
        for r in range(replicas):
            s = simulate_walk(step, k_max, 0.0, rng)
            running = np.minimum.accumulate(s)
            prev = np.concatenate([[np.inf], running[:-1]])
            counts[r] = np.count_nonzero((s < prev) & (s >= -x))
        value = float(counts.mean())
        se = float(counts.std(ddof=1) / math.sqrt(replicas))
        return (value, se) if return_bound else value
    raise ValueError(f"unknown mode {mode!r}")


def _kspace(step: StepLaw):
    lat = step.lattice
    if not lat.is_lattice:
        raise ValueError("exact DP needs a lattice step law")
    return step.coords().astype(np.int64), step.probs.astype(np.float64), lat


def _lower_bounds(lat: LatticeInfo, start: float, n: int, floors) -> np.ndarray:
    """Smallest K with start + alpha k + beta K >= floors[k], per step k."""
    k = np.arange(n + 1)
    raw = (np.asarray(floors, dtype=float) - start - lat.offset * k) / lat.span
    out = np.full(n + 1, np.iinfo(np.int64).min // 4, dtype=np.int64)
    finite = np.isfinite(raw)
    out[finite] = np.ceil(raw[finite] - LATTICE_TOL).astype(np.int64)
    return out


def killed_distribution(step: StepLaw, n: int, start: float, floors) -> tuple[np.ndarray, np.ndarray]:
    """Sub-probability law of S_n on {S_k >= floors[k] for all k <= n}.

    Returns ``(positions, masses)``.
    """
    offs, w, lat = _kspace(step)
    lower = _lower_bounds(lat, start, n, floors)
    base, masses = _killed_kernel(offs, w, 0, lower, int(n))
    ks = base + np.arange(len(masses))
    return start + lat.offset * n + lat.span * ks, masses


def survival_prob(
    step: StepLaw,
    n: int,
    a: float = 0.0,
    mode: str = "dp",
    rng: np.random.Generator | None = None,
    replicas: int = 100_000,
):
    """P_a(min_{k<=n} S_k >= 0).  ``mc`` mode returns ``(estimate, se)``."""
    if a < 0:
        raise ValueError("start level must be non-negative")
    if n == 0:
        return 1.0
    if mode == "dp":
        floors = np.zeros(n + 1)
        _, masses = killed_distribution(step, n, a, floors)
        return math.fsum(masses.tolist())
    if mode == "mc":
        rng = rng if rng is not None else np.random.default_rng(0)
        hits = 0
        batch = 10_000
        done = 0
        while done < replicas:
            m = min(batch, replicas - done)
            paths = simulate_walk(step, n, a, rng, size=m)
            hits += int(np.count_nonzero(paths.min(axis=1) >= -LATTICE_TOL))
            done += m
        p = hits / replicas
        return p, math.sqrt(p * (1 - p) / replicas)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class BallotProbe:
    ns: list
    lhs: list
    envelope: list
    fitted_constant: float | None
    scaled: list
    within_envelope: bool | None
    applicable: bool


def _ballot_lhs(step: StepLaw, n: int, x: float, a: float, b: float, lam: float | None, y: float) -> float:
    if lam is None:
        # P(min_n S >= -x, S_n in [a - x, b - x]) from 0
        floors = np.full(n + 1, -x)
        pos, m = killed_distribution(step, n, 0.0, floors)
        sel = (pos >= a - x - LATTICE_TOL) & (pos <= b - x + LATTICE_TOL)
    else:
        # P_x(S_n in [y + a, y + b], min_n S >= 0, min_[lam n, n] S >= y)
        k = np.arange(n + 1)
        floors = np.where(k >= lam * n, max(y, 0.0), 0.0)
        pos, m = killed_distribution(step, n, x, floors)
        sel = (pos >= y + a - LATTICE_TOL) & (pos <= y + b + LATTICE_TOL)
    return math.fsum(m[sel].tolist())


def ballot_bound_probe(
    step: StepLaw,
    x: float = 0.0,
    a: float = 0.0,
    b: float = 1.0,
    ns=(100, 400, 900),
    lam: float | None = None,
    y: float = 0.0,
    slack: float = 1.25,
) -> BallotProbe:
    """Compare the ballot probability with the (1+x)(1+b-a)(1+b) n^{-3/2} shape.

    The constant is fitted at the first ``n``; the probe then reports
    whether later values stay below ``slack`` times the fitted envelope.
    The constant itself is never asserted.
    """
    if not b >= a >= 0 or x < 0:
        raise ValueError("need b >= a >= 0 and x >= 0")
    ns = [int(n) for n in ns]
    shape = [(1 + x) * (1 + b - a) * (1 + b) * n ** -1.5 for n in ns]
    lhs = [_ballot_lhs(step, n, x, a, b, lam, y) for n in ns]
    scaled = [v * n ** 1.5 for v, n in zip(lhs, ns)]
    if step.variance < 1e-300:
        return BallotProbe(ns, lhs, shape, None, scaled, None, False)
    c_fit = lhs[0] / shape[0] if shape[0] > 0 else None
    if not c_fit:
        return BallotProbe(ns, lhs, shape, c_fit, scaled, None, True)
    env = [c_fit * s for s in shape]
    ok = all(v <= slack * e for v, e in zip(lhs[1:], env[1:]))
    return BallotProbe(ns, lhs, env, c_fit, scaled, ok, True)
