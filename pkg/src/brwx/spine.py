"""Spinal decomposition under the size-biased measure Q.

Under Q the spine particle reproduces with the tilted law (atom probability
multiplied by the sum of e^{-x} over its children) and passes the spine on
to a child chosen proportionally to e^{-V}; every other particle reproduces
with the original law.  ``importance_estimate`` turns Q-samples back into
P-probabilities with the weight 1/W_n.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .brw import (
    CapExceeded,
    Caps,
    Occupation,
    TreeRun,
    _merge,
    draw_children,
    occupation_min_W,
    occupation_step,
    offspring_table,
    root_occupation,
)
from .model import LATTICE_TOL, NotBoundaryError, OffspringLaw, log_laplace, require_boundary
from .rng import as_generator
from .stats import mean_jackknife


@dataclass(frozen=True)
class SizeBiasedLaw:
    atoms: tuple  # ((prob, children), ...) aligned with source.expand().atoms
    source: OffspringLaw = field(compare=False)
    renormalized: float = 0.0

    @property
    def probs(self) -> np.ndarray:
        return np.array([p for p, _ in self.atoms])


def size_bias(law: OffspringLaw, tol: float = 1e-10) -> SizeBiasedLaw:
    """Tilt every atom by the sum of e^{-x} over its children.

    When |psi(1)| is positive but within ``tol`` the weights are
    renormalised to sum to one and the discrepancy is recorded.
    """
    psi1 = log_laplace(law, 1.0)
    if not abs(psi1) <= tol:
        raise NotBoundaryError(f"size-biasing needs psi(1) = 0, got {psi1:.3e}")
    expanded = law.expand()
    raw = [p * math.fsum(math.exp(-x) for x in c) for p, c in expanded.atoms]
    total = math.fsum(raw)
    atoms = tuple((w / total, tuple(c)) for w, (_, c) in zip(raw, expanded.atoms))
    return SizeBiasedLaw(atoms, law, renormalized=total - 1.0)


# ---------------------------------------------------------------------------
# spine sampling


def _spine_choice(children: np.ndarray, rng: np.random.Generator) -> int:
    w = np.exp(-(children - children.min()))
    cum = np.cumsum(w)
    return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(w) - 1)


def sample_spine_step(sb: SizeBiasedLaw, current: float, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Children of the spine particle and the index of the next spine particle."""
    cum = np.cumsum(sb.probs)
    a = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(cum) - 1)
    children = current + np.asarray(sb.atoms[a][1], dtype=float)
    return children, _spine_choice(children, rng)


@dataclass(frozen=True, eq=False)
class SpineRun:
    spine: np.ndarray  # V(w_0), ..., V(w_n)
    records: tuple  # per step: (children displacements, chosen index)
    tree: TreeRun | None = None  # full Q-tree when materialized
    spine_index: tuple | None = None  # index of w_g in generation g of the tree

    @property
    def W(self) -> float | None:
        return None if self.tree is None else float(self.tree.W[-1])


def simulate_spine(
    law: OffspringLaw,
    n: int,
    a: float = 0.0,
    rng: np.random.Generator | None = None,
    materialize: bool = False,
    caps: Caps = Caps(),
) -> SpineRun:
    rng = as_generator(rng)
    sb = size_bias(law)
    if not materialize:
        pos = np.empty(n + 1)
        pos[0] = a
        recs = []
        for k in range(n):
            kids, i = sample_spine_step(sb, pos[k], rng)
            recs.append((kids - pos[k], i))
            pos[k + 1] = kids[i]
        return SpineRun(pos, tuple(recs))
    return _materialized(law, sb, n, a, rng, caps)


def _materialized(law, sb, n, a, rng, caps) -> SpineRun:
    tab = offspring_table(law)
    st = _spine_table(sb, tab)
    lat = tab.lattice
    exact = lat.is_lattice and tab.coords is not None and a == 0.0
    positions = [np.array([float(a)])]
    coords = [np.zeros(1, dtype=np.int64)] if exact else None
    parents = [np.zeros(0, dtype=np.int64)]
    spine_idx = [0]
    recs = []
    records = 1
    for g in range(1, n + 1):
        prev = positions[-1]
        s = spine_idx[-1]
        others = np.delete(np.arange(len(prev)), s)
        par, vidx = draw_children(tab, len(others), rng)
        par = others[par]
        atom = min(int(np.searchsorted(st.cum, rng.random(), side="right")), len(st.cum) - 1)
        svidx = st.children[atom]
        i = min(int(np.searchsorted(st.tilt[atom], rng.random(), side="right")), len(svidx) - 1)
        par = np.concatenate([par, np.full(len(svidx), s)])
        vidx = np.concatenate([vidx, svidx])
        if exact:
            co = coords[-1][par] + tab.coords[vidx]
            pos = lat.offset * g + lat.span * co.astype(float)
            coords.append(co)
        else:
            pos = prev[par] + tab.values[vidx]
        records += len(pos)
        if records > caps.max_particles:
            raise CapExceeded(g, records, caps.max_particles)
        positions.append(pos)
        parents.append(par)
        spine_idx.append(len(pos) - len(svidx) + i)
        recs.append((tab.values[svidx], i))
    W = np.array([math.fsum(np.exp(-p).tolist()) for p in positions])
    I = np.array([p.min() for p in positions])
    tree = TreeRun(law, lat, tuple(positions), tuple(parents), tuple(coords) if exact else None, W, I)
    spine = np.array([positions[g][spine_idx[g]] for g in range(n + 1)])
    return SpineRun(spine, tuple(recs), tree, tuple(spine_idx))


# ---------------------------------------------------------------------------
# Q-trees as occupation counts


@dataclass(frozen=True, eq=False)
class _SpineTable:
    cum: np.ndarray
    children: tuple  # per atom, value indices of its children
    tilt: tuple  # per atom, cumulative spine-choice probabilities


def _spine_table(sb: SizeBiasedLaw, tab) -> _SpineTable:
    probs = sb.probs / sb.probs.sum()
    kids, tilts = [], []
    for _, c in sb.atoms:
        c = np.asarray(c, dtype=float)
        kids.append(np.searchsorted(tab.values, c) if len(c) else np.zeros(0, dtype=np.int64))
        if len(c):
            w = np.exp(-(c - c.min()))
            t = np.cumsum(w / w.sum())
            t[-1] = 1.0
        else:
            t = np.zeros(0)
        tilts.append(t)
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    return _SpineTable(cum, tuple(kids), tuple(tilts))


def simulate_q_occupation(
    law: OffspringLaw, n: int, replicas: int, rng: np.random.Generator, a: float = 0.0
) -> Occupation:
    """Generation-n occupation counts of independent Q_a-trees (spine included)."""
    tab = offspring_table(law)
    st = _spine_table(size_bias(law), tab)
    root = root_occupation(tab, replicas, a)
    exact = root.exact
    spine = root.key.copy()
    step_keys = tab.coords if exact else tab.values
    occ = Occupation(0, np.zeros(0, dtype=np.int64), root.key[:0], np.zeros(0, dtype=np.int64), tab.lattice, exact)
    reps = np.arange(replicas, dtype=np.int64)
    for _ in range(n):
        occ = occupation_step(tab, occ, rng) if len(occ.count) else Occupation(
            occ.g + 1, occ.replica, occ.key, occ.count, occ.lattice, exact)
        atom = np.minimum(np.searchsorted(st.cum, rng.random(replicas), side="right"), len(st.cum) - 1)
        u = rng.random(replicas)
        new_rep, new_key = [], []
        next_spine = spine.copy()
        for k, kids in enumerate(st.children):
            sel = atom == k
            if not sel.any() or len(kids) == 0:
                continue
            pick = np.minimum(np.searchsorted(st.tilt[k], u[sel], side="right"), len(kids) - 1)
            base = spine[sel]
            next_spine[sel] = base + step_keys[kids[pick]]
            for i, v in enumerate(kids):
                off = pick != i
                new_rep.append(reps[sel][off])
                new_key.append(base[off] + step_keys[v])
        spine = next_spine
        if new_rep:
            rep = np.concatenate([occ.replica] + new_rep)
            key = np.concatenate([occ.key] + new_key)
            cnt = np.concatenate([occ.count, np.ones(sum(len(r) for r in new_rep), dtype=np.int64)])
            rep, key, cnt = _merge(rep, key, cnt)
            occ = Occupation(occ.g, rep, key, cnt, occ.lattice, exact)
    rep, key, cnt = _merge(
        np.concatenate([occ.replica, reps]), np.concatenate([occ.key, spine]),
        np.concatenate([occ.count, np.ones(replicas, dtype=np.int64)]),
    )
    return Occupation(n, rep, key, cnt, tab.lattice, exact)


# ---------------------------------------------------------------------------
# importance sampling


@dataclass(frozen=True)
class GenerationView:
    """Multiset of generation-n positions of one tree."""

    positions: np.ndarray
    counts: np.ndarray

    @property
    def min(self) -> float:
        return float(self.positions.min()) if len(self.positions) else math.inf


@dataclass(frozen=True)
class MinAtMost:
    """Event {I_n <= level}."""

    level: float

    def __call__(self, view) -> bool:
        if isinstance(view, TreeRun):
            return bool(view.I[-1] <= self.level + LATTICE_TOL)
        return view.min <= self.level + LATTICE_TOL

    def on_minimum(self, mins: np.ndarray) -> np.ndarray:
        return mins <= self.level + LATTICE_TOL


def always(view) -> bool:
    return True


@dataclass(frozen=True)
class ISResult:
    estimate: float
    se: float
    replicas: int
    excluded: int
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(
            {"estimate": self.estimate, "se": self.se, "replicas": self.replicas,
             "excluded": self.excluded, "seed": self.seed},
            sort_keys=True,
        )


def is_terms(
    law: OffspringLaw, n: int, event, replicas: int, rng: np.random.Generator,
    engine: str = "occupation", caps: Caps = Caps(),
) -> tuple[np.ndarray, int]:
    """Per-replica values 1_A / W_n under Q, and the number of excluded replicas."""
    if engine == "occupation":
        occ = simulate_q_occupation(law, n, replicas, rng)
        mins, logw = occupation_min_W(occ, replicas)
        if hasattr(event, "on_minimum"):
            hit = event.on_minimum(mins)
        else:
            pos = occ.positions()
            hit = np.zeros(replicas, dtype=bool)
            order = np.argsort(occ.replica, kind="stable")
            bounds = np.searchsorted(occ.replica[order], np.arange(replicas + 1))
            for r in range(replicas):
                sl = order[bounds[r] : bounds[r + 1]]
                hit[r] = bool(event(GenerationView(pos[sl], occ.count[sl])))
        return np.where(hit, np.exp(-logw), 0.0), 0
    if engine == "tree":
        vals = []
        excluded = 0
        for _ in range(replicas):
            try:
                run = simulate_spine(law, n, 0.0, rng, materialize=True, caps=caps)
            except CapExceeded:
                excluded += 1
                continue
            logw = logsumexp(-run.tree.positions[-1])
            vals.append(math.exp(-logw) if event(run.tree) else 0.0)
        return np.asarray(vals), excluded
    raise ValueError(f"unknown engine {engine!r}")


def importance_estimate(
    law: OffspringLaw,
    n: int,
    event,
    replicas: int,
    rng=None,
    caps: Caps = Caps(),
    engine: str = "occupation",
    seed: int | None = None,
) -> ISResult:
    """P(A) = E_Q[1_A / W_n] with a jackknife standard error.

    ``engine='occupation'`` evaluates events on the generation-n multiset
    (a :class:`GenerationView`, or vectorised through ``on_minimum``);
    ``engine='tree'`` materialises every Q-tree and passes the TreeRun.
    """
    require_boundary(law)
    rng = as_generator(rng if rng is not None else seed)
    vals, excluded = is_terms(law, n, event, replicas, rng, engine, caps)
    est, se = mean_jackknife(vals)
    return ISResult(est, se, len(vals), excluded, seed)
