"""Exact sampler of the path to a uniformly chosen leftmost particle (lattice laws).

For a subtree of height h let T be the lattice coordinate of its minimum
relative to its root (minimum = alpha h + beta T) and k the number of
particles attaining it.  The tables

    P_h[t, k] = P(T = t, k minimizers),   G_h(t) = P(T > t)   (extinction counts as T = +inf)

obey a one-step recursion over the root's offspring atom.  Sampling goes
top-down: draw (t, k) for the root, then the root's atom and, for every
child, whether its subtree reaches the minimum and with how many minimizers
(posterior given (t, k)), then follow a child with probability k_i / k.
Following children in proportion to their minimizer counts is exactly the
uniform choice among all k minimizers.

The count axis is truncated at ``kmax``; larger counts are lumped in an
overflow column whose total mass is reported and never sampled from.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .brw import MinPath
from .exact import FiniteLaw
from .model import LATTICE_TOL, OffspringLaw, lattice_structure


def _shift(arr: np.ndarray, j: int, low_fill, high_fill) -> np.ndarray:
    """out[t] = arr[t - j] along axis 0, filling outside the table."""
    out = np.empty_like(arr)
    T = arr.shape[0]
    if j == 0:
        return arr.copy()
    if j > 0:
        out[j:] = arr[: T - j]
        out[:j] = low_fill
    else:
        out[: T + j] = arr[-j:]
        out[T + j :] = high_fill
    return out


def _comb(A, Ag, B, Bg, K):
    """Combine two independent subtrees: minimum and minimizer count of the union.

    A, B have columns k = 0..K+1 (column 0 unused, K+1 = overflow); Ag, Bg
    are the probabilities of lying strictly above t.
    """
    C = A * Bg[..., None] + Ag[..., None] * B
    for k1 in range(1, K + 2):
        a = A[..., k1 : k1 + 1]
        if not np.any(a):
            continue
        # k1 + k2 for k2 = 1..K+1, clipped into the overflow column
        lim = K + 1 - k1
        if lim > 0:
            C[..., k1 + 1 : K + 1] += a * B[..., 1 : lim]
        C[..., K + 1] += a[..., 0] * B[..., max(lim, 1) : K + 2].sum(axis=-1)
    return C


@dataclass(frozen=True)
class SampledPath:
    coords: np.ndarray  # lattice coordinate sums along the path
    values: np.ndarray
    argmin_count: int


class LatticeMinSampler:
    """Law of the leftmost particle and exact sampler of the path leading to it."""

    def __init__(self, law: OffspringLaw, n: int, kmax: int = 64):
        lat = lattice_structure(law)
        if not lat.is_lattice:
            raise ValueError("the recursive sampler needs a lattice law")
        self.law = law
        self.n = int(n)
        self.K = int(kmax)
        self.lattice = lat
        exp = law.expand()
        self.atoms = [(p, lat.coords(np.asarray(c, dtype=float)) if c else np.zeros(0, dtype=np.int64))
                      for p, c in exp.atoms if p > 0]
        js = np.concatenate([a for _, a in self.atoms if len(a)] or [np.zeros(1, dtype=np.int64)])
        self.tlo = self.n * min(int(js.min()), 0)
        self.thi = self.n * max(int(js.max()), 0)
        self._build()

    # -- tables --------------------------------------------------------
    def _build(self):
        K, n = self.K, self.n
        T = self.thi - self.tlo + 1
        P = np.zeros((n + 1, T, K + 2))
        G = np.zeros((n + 1, T))
        zero = -self.tlo
        P[0, zero, 1] = 1.0
        G[0, :] = (np.arange(T) < zero).astype(float)
        for h in range(1, n + 1):
            Pn = np.zeros((T, K + 2))
            Gn = np.zeros(T)
            for p, js in self.atoms:
                if len(js) == 0:
                    Gn += p
                    continue
                A, Ag = self._child(h - 1, int(js[0]), P, G)
                for j in js[1:]:
                    B, Bg = self._child(h - 1, int(j), P, G)
                    A = _comb(A, Ag, B, Bg, K)
                    Ag = Ag * Bg
                Pn += p * A
                Gn += p * Ag
            P[h] = Pn
            G[h] = Gn
        self.P = P
        self.G = G
        self.overflow = float(P[n, :, K + 1].sum())

    def _child(self, h, j, P, G):
        return _shift(P[h], j, 0.0, 0.0), _shift(G[h], j, 1.0, G[h][-1])

    def _row(self, h, t):
        """(P_h[t, :], G_h(t)) with out-of-table conventions."""
        i = t - self.tlo
        if i < 0:
            return np.zeros(self.K + 2), 1.0
        if i >= self.P.shape[1]:
            return np.zeros(self.K + 2), float(self.G[h][-1])
        return self.P[h, i], float(self.G[h, i])

    # -- laws ----------------------------------------------------------
    def position(self, g: int, t) -> np.ndarray:
        return self.lattice.offset * g + self.lattice.span * np.asarray(t, dtype=float)

    def min_law(self) -> FiniteLaw:
        mass = self.P[self.n].sum(axis=1)
        t = np.arange(self.tlo, self.thi + 1)
        keep = mass > 0
        return FiniteLaw(self.position(self.n, t[keep]), mass[keep], float(self.G[self.n][-1]))

    def level_coord(self, level: float) -> int:
        """Largest coordinate t with alpha n + beta t <= level."""
        lat = self.lattice
        return math.floor((level - lat.offset * self.n) / lat.span + LATTICE_TOL)

    def prob_le(self, level: float) -> float:
        t = self.level_coord(level)
        return 1.0 - self._row(self.n, t)[1]

    def count_law(self) -> np.ndarray:
        """P(k minimizers | survival) for k = 0..K (+ overflow last)."""
        m = self.P[self.n].sum(axis=0)
        return m / m.sum()

    # -- sampling ------------------------------------------------------
    def sample(self, rng: np.random.Generator, level: float | None = None) -> SampledPath:
        """One path, optionally conditioned on I_n <= level."""
        table = self.P[self.n][:, 1 : self.K + 1]
        if level is not None:
            cut = self.level_coord(level) - self.tlo + 1
            table = table[: max(cut, 0)]
        flat = table.ravel()
        total = flat.sum()
        if total <= 0:
            raise ValueError("the conditioning event has probability zero")
        cum = np.cumsum(flat)
        i = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(flat) - 1)
        t = self.tlo + i // self.K
        k = 1 + i % self.K
        coords = np.zeros(self.n + 1, dtype=np.int64)
        root_k = k
        pos = 0
        for h in range(self.n, 0, -1):
            j, k = self._descend(h, t, k, rng)
            pos += j
            coords[self.n - h + 1] = pos
            t -= j
        g = np.arange(self.n + 1)
        return SampledPath(coords, self.position(g, coords), root_k)

    def _descend(self, h, t, k, rng):
        # only counts 0..k matter below a node with k minimizers
        L = k + 1
        weights = []
        folds = []
        for p, js in self.atoms:
            if len(js) == 0:
                weights.append(0.0)
                folds.append(None)
                continue
            rows = []
            for j in js:
                r, gt = self._row(h - 1, t - int(j))
                rows.append((r[:L], gt))
            prefix = [rows[0]]
            for Brow, Bg in rows[1:]:
                Arow, Ag = prefix[-1]
                prefix.append((_comb_row(Arow, Ag, Brow, Bg), Ag * Bg))
            weights.append(p * prefix[-1][0][k])
            folds.append((rows, prefix))
        a = _draw(np.asarray(weights), rng)
        rows, prefix = folds[a]
        js = self.atoms[a][1]
        m = len(js)
        # backward sampling of child statuses: 0 means "above t"
        status = np.zeros(m, dtype=np.int64)
        need = k  # minimizers still to be allocated to children 0..i
        for i in range(m - 1, -1, -1):
            crow, cg = rows[i]
            if i == 0:
                status[0] = need
                break
            prow, pg = prefix[i - 1]
            ks = np.arange(need + 1)
            # option ki: child i has ki minimizers (0 = above t), the earlier
            # children carry the remaining need - ki
            w = np.empty(need + 1)
            w[0] = prow[need] * cg
            w[need] = pg * crow[need]
            if need > 1:
                w[1:need] = prow[need - ks[1:need]] * crow[1:need]
            status[i] = _draw(w, rng)
            need -= status[i]
            if need == 0:
                break
        pick = _draw(status.astype(float), rng)
        return int(js[pick]), int(status[pick])


def _comb_row(A, Ag, B, Bg):
    C = A * Bg + Ag * B
    if len(A) > 2:
        C[2:] += np.convolve(A[1:], B[1:])[: len(A) - 2]
    return C


def _draw(w: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(w)
    return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(w) - 1)


def sample_min_paths(sampler: LatticeMinSampler, count: int, rng: np.random.Generator, level: float | None = None):
    """Stack ``count`` sampled paths: (values (count, n+1), argmin counts)."""
    vals = np.empty((count, sampler.n + 1))
    ks = np.empty(count, dtype=np.int64)
    for r in range(count):
        s = sampler.sample(rng, level)
        vals[r] = s.values
        ks[r] = s.argmin_count
    return vals, ks


def as_min_path(s: SampledPath) -> MinPath:
    return MinPath(s.values, s.argmin_count, -1, -1)
