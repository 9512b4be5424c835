"""Exhaustive enumeration of small trees.

Every finite identity of the model (many-to-one, the additive martingale,
the change of measure to Q and the spine posterior) is checked here against
complete enumeration of depth-n trees.  Particles in generation g+1 are
ordered by parent, then by position in the parent's ordered atom, so a tree
is identified by the tuple of atom indices chosen generation by generation.
"""
from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import LATTICE_TOL, LatticeInfo, OffspringLaw, lattice_structure
from .rwalk import StepLaw, step_law
from .spine import size_bias

ATOM_BOUND = 10**7


class EnumerationBoundError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TreeAtom:
    prob: float
    choices: tuple  # per generation, atom index chosen by each particle
    positions: tuple  # per generation, np.ndarray of positions
    parents: tuple  # per generation >= 1, index of the parent
    steps: tuple  # per generation >= 1, displacement from the parent

    @property
    def depth(self) -> int:
        return len(self.positions) - 1

    def W(self, g: int | None = None) -> float:
        pos = self.positions[self.depth if g is None else g]
        return math.fsum(np.exp(-pos).tolist())

    def path(self, i: int) -> np.ndarray:
        """Positions V(u_1), ..., V(u_n) along the ancestry of particle i."""
        out = np.empty(self.depth)
        for g in range(self.depth, 0, -1):
            out[g - 1] = self.positions[g][i]
            i = self.parents[g][i]
        return out

    def increments(self, i: int) -> tuple:
        out = [0.0] * self.depth
        for g in range(self.depth, 0, -1):
            out[g - 1] = float(self.steps[g][i])
            i = self.parents[g][i]
        return tuple(out)


def _atoms(law: OffspringLaw):
    exp = law.expand()
    return [(k, p, np.asarray(c, dtype=float)) for k, (p, c) in enumerate(exp.atoms) if p > 0]


def count_atoms(law: OffspringLaw, n: int) -> int:
    """Number of trees that enumerate_tree(law, n) would produce."""
    atoms = _atoms(law)
    sizes = {len(c) for _, _, c in atoms}
    # worst case over the generation sizes reachable; enumerate the size counts
    states = {1: 1}
    total = 1
    for _ in range(n):
        nxt = defaultdict(int)
        for size, mult in states.items():
            for combo in itertools.combinations_with_replacement(sorted(sizes), size) if size else [()]:
                ways = _arrangements(combo, atoms)
                nxt[sum(combo)] += mult * ways
        states = dict(nxt)
        total = sum(states.values())
        if total > ATOM_BOUND:
            return total
    return total


def _arrangements(combo, atoms) -> int:
    by_size = defaultdict(int)
    for _, _, c in atoms:
        by_size[len(c)] += 1
    ways = math.factorial(len(combo))
    for s in set(combo):
        ways //= math.factorial(combo.count(s))
    for s in combo:
        ways *= by_size[s]
    return ways


def enumerate_tree(law: OffspringLaw, n: int, bound: int = ATOM_BOUND) -> tuple[TreeAtom, ...]:
    """All depth-n trees with their exact probabilities (cached, read-only)."""
    return _enumerate(law, int(n), int(bound))


@lru_cache(maxsize=8)
def _enumerate(law: OffspringLaw, n: int, bound: int) -> tuple[TreeAtom, ...]:
    if n < 0:
        raise ValueError("n must be non-negative")
    total = count_atoms(law, n)
    if total > bound:
        raise EnumerationBoundError(f"{total} tree atoms exceed the bound {bound}")
    atoms = _atoms(law)
    logs = [math.log(p) for _, p, _ in atoms]
    partial = [(0.0, (), (np.zeros(1),), (), ())]
    for _ in range(n):
        nxt = []
        for logp, choices, positions, parents, steps in partial:
            cur = positions[-1]
            for combo in itertools.product(range(len(atoms)), repeat=len(cur)):
                kids, par = [], []
                for i, a in enumerate(combo):
                    kids.append(cur[i] + atoms[a][2])
                    par.append(np.full(len(atoms[a][2]), i, dtype=np.int64))
                lp = logp + math.fsum(logs[a] for a in combo)
                pos = np.concatenate(kids) if kids else np.zeros(0)
                pa = np.concatenate(par) if par else np.zeros(0, dtype=np.int64)
                disp = np.concatenate([atoms[a][2] for a in combo]) if combo else np.zeros(0)
                idx = tuple(atoms[a][0] for a in combo)
                nxt.append((lp, choices + (idx,), positions + (pos,), parents + (pa,), steps + (disp,)))
        partial = nxt
    empty = (np.zeros(0, dtype=np.int64),)
    return tuple(
        TreeAtom(math.exp(lp), ch, pos, empty + par, (np.zeros(0),) + st)
        for lp, ch, pos, par, st in partial
    )


def total_probability(trees) -> float:
    return math.fsum(t.prob for t in trees)


def mean_W(law: OffspringLaw, n: int) -> float:
    return math.fsum(t.prob * t.W() for t in enumerate_tree(law, n))


def martingale_defect(law: OffspringLaw, n: int) -> float:
    """max over depth-n trees of |E[W_{n+1} | tree] - W_n(tree)|."""
    mass = defaultdict(float)
    acc = defaultdict(float)
    for t in enumerate_tree(law, n + 1):
        key = t.choices[:n]
        mass[key] += t.prob
        acc[key] += t.prob * t.W()
    worst = 0.0
    for t in enumerate_tree(law, n):
        key = t.choices
        worst = max(worst, abs(acc[key] / mass[key] - t.W()))
    return worst


# ---------------------------------------------------------------------------
# many-to-one


def path_measure(law: OffspringLaw, n: int) -> dict[tuple, float]:
    """E[number of generation-n particles whose increment sequence is key]."""
    return dict(_path_measure(law, n))


@lru_cache(maxsize=8)
def _path_measure(law: OffspringLaw, n: int) -> tuple:
    out = defaultdict(float)
    for t in enumerate_tree(law, n):
        for i in range(len(t.positions[n])):
            out[t.increments(i)] += t.prob
    return tuple(out.items())


def walk_measure(step: StepLaw, n: int) -> dict[tuple, float]:
    """Probability of each increment sequence of the step law."""
    vals = step.values.tolist()
    probs = step.probs.tolist()
    out = {}
    for idx in itertools.product(range(len(vals)), repeat=n):
        out[tuple(vals[i] for i in idx)] = math.prod(probs[i] for i in idx)
    return out


def exact_many_to_one(law: OffspringLaw, n: int, g) -> tuple[float, float]:
    """(E[sum_{|u|=n} g(path_u)], E[e^{S_n} g(S_1..S_n)]) by enumeration.

    ``g`` receives the array of positions along the path.
    """
    lhs_terms, rhs_terms = [], []
    for inc, mass in _path_measure(law, n):
        lhs_terms.append(mass * g(np.cumsum(inc)))
    for inc, prob in walk_measure(step_law(law), n).items():
        path = np.cumsum(inc)
        rhs_terms.append(prob * math.exp(path[-1] if n else 0.0) * g(path))
    return math.fsum(lhs_terms), math.fsum(rhs_terms)


def indicator_basis(law: OffspringLaw, n: int) -> list[tuple[str, object]]:
    """Indicators of every single increment path plus a few threshold events.

    Paths are compared through lattice coordinates when the support is a
    lattice, so no float equality is involved.
    """
    lat = lattice_structure(law)
    step = step_law(law)
    basis = []
    for inc in walk_measure(step, n):
        target = np.cumsum(inc)
        basis.append((f"path{_fmt(inc)}", _path_indicator(target, lat)))
    for k in range(1, n + 1):
        basis.append((f"S{k}<0", lambda p, k=k: float(p[k - 1] < -LATTICE_TOL)))
        basis.append((f"min<=S{k}", lambda p, k=k: float(p[k - 1] <= p[: k].min() + LATTICE_TOL)))
    basis.append(("one", lambda p: 1.0))
    return basis


def _fmt(inc) -> str:
    return "(" + ",".join(f"{x:+.3f}" for x in inc) + ")"


def _path_indicator(target: np.ndarray, lat: LatticeInfo):
    if lat.is_lattice:
        gens = np.arange(1, len(target) + 1)

        def coords(p):
            return np.rint((np.asarray(p) - lat.offset * gens) / lat.span).astype(np.int64)

        want = coords(target)
        return lambda p: float(np.array_equal(coords(p), want))
    return lambda p: float(np.all(np.abs(np.asarray(p) - target) <= LATTICE_TOL))


def many_to_one_defect(law: OffspringLaw, n: int) -> float:
    worst = 0.0
    for _, g in indicator_basis(law, n):
        lhs, rhs = exact_many_to_one(law, n, g)
        worst = max(worst, abs(lhs - rhs))
    return worst


# ---------------------------------------------------------------------------
# the size-biased measure


@dataclass(frozen=True)
class QAtom:
    tree: int  # index into enumerate_tree(law, n)
    particle: int  # spine particle in generation n
    prob: float


def exact_q_law(law: OffspringLaw, n: int) -> tuple[list[TreeAtom], list[QAtom]]:
    """Q-probability of every (tree, spine) pair: W_n P(tree) e^{-V(u)} / W_n."""
    trees = enumerate_tree(law, n)
    out = []
    for ti, t in enumerate(trees):
        w = np.exp(-t.positions[n])
        for i in range(len(w)):
            out.append(QAtom(ti, i, t.prob * float(w[i])))
    return trees, out


def spinal_enumeration(law: OffspringLaw, n: int, weight_sign: float = 1.0) -> dict[tuple, float]:
    """Q-law of (tree choices, spine particle) built from the spinal description.

    Independent of exact_q_law: the spine reproduces with the size-biased law
    and picks its successor proportionally to e^{-x}, everyone else uses the
    original law.  ``weight_sign=-1`` replaces e^{-x} by e^{+x} (deliberate
    defect used to check that the oracle notices).
    """
    sb = size_bias(law)
    atoms = _atoms(law)
    probs = [p for _, p, _ in atoms]
    sb_probs = [sb.atoms[k][0] for k, _, _ in atoms]
    sizes = [len(d) for _, _, d in atoms]
    tilts = []
    for _, _, disp in atoms:
        t = np.exp(-weight_sign * np.asarray(disp, dtype=float))
        tilts.append((t / t.sum()).tolist() if len(t) else [])
    # state: (probability, choices so far, width of the last generation, spine index)
    states = [(1.0, (), 1, 0)]
    for _ in range(n):
        nxt = []
        for q, choices, width, spine in states:
            for combo in itertools.product(range(len(atoms)), repeat=width):
                prob = q
                for i, a in enumerate(combo):
                    prob *= sb_probs[a] if i == spine else probs[a]
                if prob == 0.0:
                    continue
                new_width = sum(sizes[a] for a in combo)
                first = sum(sizes[a] for a in combo[:spine])
                idx = tuple(atoms[a][0] for a in combo)
                for j, tj in enumerate(tilts[combo[spine]]):
                    nxt.append((prob * tj, choices + (idx,), new_width, first + j))
        states = nxt
    out = defaultdict(float)
    for q, choices, _, spine in states:
        out[(choices, spine)] += q
    return dict(out)


@dataclass
class QChecks:
    total_mass: float
    reweighting: float  # max |Q(t) - W_n(t) P(t)|
    posterior: float  # max |Q(u | t) - e^{-V(u)} / W_n(t)|
    joint: float  # max |Q(t, u) spinal - Q(t, u) by reweighting|
    spine_walk_tv: float  # TV between the spine increments and the step-law walk

    @property
    def worst(self) -> float:
        return max(abs(self.total_mass - 1.0), self.reweighting, self.posterior, self.joint, self.spine_walk_tv)


def q_law_checks(law: OffspringLaw, n: int, weight_sign: float = 1.0) -> QChecks:
    trees, qatoms = exact_q_law(law, n)
    spinal = spinal_enumeration(law, n, weight_sign)
    index = {t.choices: i for i, t in enumerate(trees)}
    q_tree = defaultdict(float)
    joint_err = 0.0
    seen = set()
    for (choices, u), q in spinal.items():
        ti = index[choices]
        q_tree[ti] += q
        seen.add((ti, u))
    by_pair = {(a.tree, a.particle): a.prob for a in qatoms}
    for key in set(by_pair) | seen:
        ch = trees[key[0]].choices
        joint_err = max(joint_err, abs(spinal.get((ch, key[1]), 0.0) - by_pair.get(key, 0.0)))
    rew = 0.0
    post = 0.0
    for ti, t in enumerate(trees):
        w = t.W()
        rew = max(rew, abs(q_tree[ti] - w * t.prob))
        if q_tree[ti] > 0:
            for u in range(len(t.positions[n])):
                cond = spinal.get((t.choices, u), 0.0) / q_tree[ti]
                post = max(post, abs(cond - math.exp(-t.positions[n][u]) / w))
    # spine increments versus the walk
    spine_inc = defaultdict(float)
    for (choices, u), q in spinal.items():
        spine_inc[trees[index[choices]].increments(u)] += q
    walk = walk_measure(step_law(law), n)
    keys = set(spine_inc) | set(walk)
    tv = 0.5 * math.fsum(abs(spine_inc.get(k, 0.0) - walk.get(k, 0.0)) for k in keys)
    total = math.fsum(spinal.values())
    return QChecks(total, rew, post, joint_err, tv)


# ---------------------------------------------------------------------------
# minimum laws


@dataclass(frozen=True)
class FiniteLaw:
    values: np.ndarray
    probs: np.ndarray
    missing: float = 0.0  # mass of "undefined" (extinct, or killed everywhere)

    def cdf(self, x: float) -> float:
        return math.fsum(self.probs[self.values <= x + LATTICE_TOL].tolist())

    def pmf(self, x: float) -> float:
        return math.fsum(self.probs[np.abs(self.values - x) <= LATTICE_TOL].tolist())

    def mean(self) -> float:
        return math.fsum((self.values * self.probs).tolist()) / math.fsum(self.probs.tolist())


def _collect(pairs, lat: LatticeInfo, g: int, missing: float) -> FiniteLaw:
    acc = defaultdict(float)
    for v, p in pairs:
        if lat.is_lattice:
            key = int(np.rint((v - lat.offset * g) / lat.span))
        else:
            key = round(v, 9)
        acc[key] += p
    keys = sorted(acc)
    if lat.is_lattice:
        vals = np.array([lat.offset * g + lat.span * k for k in keys])
    else:
        vals = np.array(keys, dtype=float)
    return FiniteLaw(vals, np.array([acc[k] for k in keys]), missing)


def exact_min_cdf(law: OffspringLaw, n: int, killed: bool = False) -> FiniteLaw:
    """Exact law of I_n, or of the killed minimum when ``killed``."""
    lat = lattice_structure(law)
    pairs, missing = [], []
    for t in enumerate_tree(law, n):
        pos = t.positions[n]
        if killed:
            ok = np.ones(len(pos), dtype=bool)
            for i in range(len(pos)):
                ok[i] = bool(np.all(t.path(i) >= -LATTICE_TOL))
            pos = pos[ok]
        if len(pos):
            pairs.append((float(pos.min()), t.prob))
        else:
            missing.append(t.prob)
    return _collect(pairs, lat, n, math.fsum(missing))


def exact_stopping_line(law: OffspringLaw, n: int, A: float) -> dict[tuple, float]:
    """Law of (sorted line entries as (generation, rounded position), truncated)."""
    out = defaultdict(float)
    for t in enumerate_tree(law, n):
        entries = []
        truncated = False
        # alive[g] marks generation-g particles whose ancestors (incl. self) are all < A
        alive = np.array([0.0 < A])
        if not alive[0]:
            entries.append((0, 0.0))
        for g in range(1, n + 1):
            par = t.parents[g]
            pos = t.positions[g]
            from_alive = alive[par] if len(par) else np.zeros(0, dtype=bool)
            cross = from_alive & (pos >= A - LATTICE_TOL)
            entries.extend((g, round(float(x), 9)) for x in pos[cross])
            alive = from_alive & ~cross
        if alive.any():
            truncated = True
        out[(tuple(sorted(entries)), truncated)] += t.prob
    return dict(out)
