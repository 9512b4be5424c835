"""Forward simulation of the branching random walk.

Two engines share one offspring table:

* the genealogy engine keeps every particle of every generation with its
  parent index, for many replicas at once (particles of replica r form a
  contiguous block in every generation).  It backs :class:`TreeRun`, the
  leftmost path, the killed minimum and stopping lines of a given tree.
* the occupation engine keeps, per replica, how many particles sit at each
  position.  Children of the k particles at one site are drawn as
  multinomial counts, which is exact in law for every function of the
  generation's multiset of positions (I_n, W_n, first-passage sums).  It is
  what makes 10^4-10^5 replicas of trees with 2^18 leaves cheap.

For lattice laws positions are stored as integer coordinates K with
position = alpha * g + beta * K, so ties and level comparisons are exact.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .excursion import PathGrid
from .model import LATTICE_TOL, LatticeInfo, OffspringLaw, lattice_structure

DEFAULT_MAX_PARTICLES = 200_000_000
DEFAULT_MAX_BATCH = 50_000_000


class CapExceeded(RuntimeError):
    def __init__(self, generation: int, records: int, cap: int):
        super().__init__(f"particle cap {cap} exceeded at generation {generation} ({records} records)")
        self.generation = generation
        self.records = records
        self.cap = cap


class ExtinctError(ValueError):
    pass


@dataclass(frozen=True)
class Caps:
    max_particles: int = DEFAULT_MAX_PARTICLES  # genealogy records per replica
    max_batch: int = DEFAULT_MAX_BATCH  # records held by one batch in memory


# ---------------------------------------------------------------------------
# offspring tables


@dataclass(frozen=True, eq=False)
class OffspringTable:
    law: OffspringLaw
    lattice: LatticeInfo
    values: np.ndarray  # distinct displacements
    coords: np.ndarray | None  # their lattice coordinates
    kind: str
    probs: np.ndarray  # count law (product) or atom law (atoms)
    cum: np.ndarray
    ks: np.ndarray | None = None
    qprobs: np.ndarray | None = None
    qcum: np.ndarray | None = None
    starts: np.ndarray | None = None
    lens: np.ndarray | None = None
    flat: np.ndarray | None = None  # value index of each child, atoms concatenated
    incidence: np.ndarray | None = None  # atoms x values child counts

    @property
    def min_displacement(self) -> float:
        return float(self.values.min()) if len(self.values) else math.inf


def _cum(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(p)
    c[-1] = 1.0
    return c


def _normalized(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p / p.sum()


def offspring_table(law: OffspringLaw) -> OffspringTable:
    lat = lattice_structure(law)
    if law.form == "product":
        vals = np.array([x for x, _ in law.displacement], dtype=float)
        order = np.argsort(vals)
        vals = vals[order]
        q = _normalized([law.displacement[i][1] for i in order])
        ks = np.array([k for k, _ in law.count], dtype=np.int64)
        pk = _normalized([p for _, p in law.count])
        coords = lat.coords(vals) if lat.is_lattice else None
        return OffspringTable(law, lat, vals, coords, "product", pk, _cum(pk), ks=ks, qprobs=q, qcum=_cum(q))
    vals = np.unique(np.array([x for _, c in law.atoms for x in c], dtype=float))
    pa = _normalized([p for p, _ in law.atoms])
    lens = np.array([len(c) for _, c in law.atoms], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]]).astype(np.int64)
    flat = np.array([int(np.searchsorted(vals, x)) for _, c in law.atoms for x in c], dtype=np.int64)
    inc = np.zeros((len(law.atoms), len(vals)), dtype=np.int64)
    for a, (_, c) in enumerate(law.atoms):
        for x in c:
            inc[a, np.searchsorted(vals, x)] += 1
    coords = lat.coords(vals) if (lat.is_lattice and len(vals)) else None
    return OffspringTable(
        law, lat, vals, coords, "atoms", pa, _cum(pa), starts=starts, lens=lens, flat=flat, incidence=inc
    )


def _pick(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)


def draw_children(tab: OffspringTable, n_parents: int, rng: np.random.Generator):
    """Children of ``n_parents`` particles: (parent index, value index)."""
    if tab.kind == "product":
        counts = tab.ks[_pick(tab.cum, rng.random(n_parents))]
        parents = np.repeat(np.arange(n_parents), counts)
        vidx = _pick(tab.qcum, rng.random(len(parents)))
        return parents, vidx
    a = _pick(tab.cum, rng.random(n_parents))
    lens = tab.lens[a]
    parents = np.repeat(np.arange(n_parents), lens)
    first = np.cumsum(lens) - lens
    within = np.arange(len(parents)) - np.repeat(first, lens)
    vidx = tab.flat[np.repeat(tab.starts[a], lens) + within]
    return parents, vidx


def draw_child_counts(tab: OffspringTable, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Number of children at each displacement value, per group of identical particles."""
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) == 0:
        return np.zeros((0, len(tab.values)), dtype=np.int64)
    if tab.kind == "product":
        nk = rng.multinomial(counts, tab.probs)
        total = nk @ tab.ks
        return rng.multinomial(total, tab.qprobs)
    na = rng.multinomial(counts, tab.probs)
    return na @ tab.incidence


# ---------------------------------------------------------------------------
# genealogy engine


@dataclass(frozen=True, eq=False)
class Generation:
    position: np.ndarray
    coord: np.ndarray | None  # lattice coordinate K, position = alpha g + beta K
    parent: np.ndarray  # index into the previous generation
    replica: np.ndarray

    def __len__(self) -> int:
        return len(self.position)


@dataclass(frozen=True, eq=False)
class BatchRun:
    law: OffspringLaw
    lattice: LatticeInfo
    n: int
    replicas: int
    generations: tuple  # Generation per g = 0..n (empty ones after extinction)
    W: np.ndarray  # (replicas, n+1)
    I: np.ndarray  # (replicas, n+1), +inf when extinct
    extinct_at: np.ndarray  # first empty generation, -1 if none


def _lattice_positions(lat: LatticeInfo, g: int, coord: np.ndarray) -> np.ndarray:
    return lat.offset * g + lat.span * coord.astype(float)


def simulate_batch(
    law: OffspringLaw,
    n: int,
    replicas: int,
    rng: np.random.Generator,
    caps: Caps = Caps(),
    prune_level: float | None = None,
) -> BatchRun:
    """Grow ``replicas`` independent trees to generation n.

    With ``prune_level`` set, a particle is dropped as soon as no descendant
    can end at or below the level (pos + (n - g) * min displacement > level).
    Every particle of generation n at or below the level, and all its
    ancestors, are kept, so on the event {I_n <= level} the minimum, its
    minimizers and their paths are exact.  W is not available (NaN) and an
    empty generation then means the event failed or the tree died out.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    tab = offspring_table(law)
    dmin = tab.min_displacement
    lat = tab.lattice
    exact = lat.is_lattice and tab.coords is not None
    rep = np.arange(replicas, dtype=np.int64)
    gen0 = Generation(np.zeros(replicas), np.zeros(replicas, dtype=np.int64) if exact else None,
                      np.zeros(0, dtype=np.int64), rep)
    gens = [gen0]
    W = np.zeros((replicas, n + 1))
    I = np.full((replicas, n + 1), np.inf)
    W[:, 0] = 1.0
    I[:, 0] = 0.0
    per_rep = np.ones(replicas, dtype=np.int64)
    held = replicas
    extinct = np.full(replicas, -1, dtype=np.int64)
    for g in range(1, n + 1):
        prev = gens[-1]
        parents, vidx = draw_children(tab, len(prev), rng)
        r = prev.replica[parents]
        if exact:
            coord = prev.coord[parents] + tab.coords[vidx]
            pos = _lattice_positions(lat, g, coord)
        else:
            coord = None
            pos = prev.position[parents] + tab.values[vidx]
        if prune_level is not None:
            keep = pos + (n - g) * dmin <= prune_level + LATTICE_TOL
            parents, r, pos = parents[keep], r[keep], pos[keep]
            if coord is not None:
                coord = coord[keep]
        counts = np.bincount(r, minlength=replicas)
        per_rep += counts
        held += len(pos)
        if per_rep.max(initial=0) > caps.max_particles:
            raise CapExceeded(g, int(per_rep.max()), caps.max_particles)
        if held > caps.max_batch:
            raise CapExceeded(g, held, caps.max_batch)
        gens.append(Generation(pos, coord, parents, r))
        W[:, g] = np.bincount(r, weights=np.exp(-pos), minlength=replicas) if prune_level is None else np.nan
        np.minimum.at(I[:, g], r, pos)
        newly = (counts == 0) & (extinct < 0)
        extinct[newly] = g
    return BatchRun(law, lat, n, replicas, tuple(gens), W, I, extinct)


@dataclass(frozen=True, eq=False)
class TreeRun:
    """One tree: generation-indexed positions and parent links, W and I series."""

    law: OffspringLaw
    lattice: LatticeInfo
    positions: tuple
    parents: tuple
    coords: tuple | None
    W: np.ndarray
    I: np.ndarray
    extinct_at: int | None = None
    cap_hit: bool = False

    @property
    def n(self) -> int:
        return len(self.positions) - 1

    def to_csv(self, path: str | Path) -> None:
        """Debug dump of (generation, index, parent, position); small trees only."""
        if self.n > 12:
            raise ValueError("CSV dumps are limited to n <= 12")
        with open(path, "w", newline="") as fh:
            fh.write("#schema=1\n")
            w = csv.writer(fh)
            w.writerow(["generation", "index", "parent", "position"])
            for g, pos in enumerate(self.positions):
                par = self.parents[g] if g else np.full(1, -1)
                for i, x in enumerate(pos):
                    w.writerow([g, i, int(par[i]), repr(float(x))])


def tree_of(batch: BatchRun, r: int = 0) -> TreeRun:
    """Extract replica ``r`` of a batch as a TreeRun."""
    positions, parents, coords = [], [], []
    index_map = None
    for g, gen in enumerate(batch.generations):
        sel = np.flatnonzero(gen.replica == r)
        positions.append(gen.position[sel])
        coords.append(gen.coord[sel] if gen.coord is not None else None)
        if g == 0:
            parents.append(np.zeros(0, dtype=np.int64))
        else:
            parents.append(index_map[gen.parent[sel]])
        index_map = np.full(len(gen), -1, dtype=np.int64)
        index_map[sel] = np.arange(len(sel))
    ext = int(batch.extinct_at[r])
    return TreeRun(
        batch.law,
        batch.lattice,
        tuple(positions),
        tuple(parents),
        tuple(coords) if coords[0] is not None else None,
        batch.W[r].copy(),
        batch.I[r].copy(),
        ext if ext >= 0 else None,
    )


def simulate(law: OffspringLaw, n: int, rng: np.random.Generator, caps: Caps = Caps()) -> TreeRun:
    """Simulate one tree to generation n, stopping early at extinction."""
    batch = simulate_batch(law, n, 1, rng, caps)
    run = tree_of(batch, 0)
    if run.extinct_at is not None:
        g = run.extinct_at
        run = TreeRun(run.law, run.lattice, run.positions[: g + 1], run.parents[: g + 1],
                      run.coords[: g + 1] if run.coords else None, run.W[: g + 1], run.I[: g + 1], g)
    return run


# ---------------------------------------------------------------------------
# leftmost path


@dataclass(frozen=True)
class MinPath:
    values: np.ndarray
    argmin_count: int
    chosen_index: int  # rank of the chosen particle among the minimizers
    particle: int  # its index in generation n

    @property
    def n(self) -> int:
        return len(self.values) - 1


@dataclass(frozen=True, eq=False)
class MinPaths:
    values: np.ndarray  # (replicas, n+1), NaN rows for extinct replicas
    argmin_count: np.ndarray
    chosen_index: np.ndarray
    particle: np.ndarray  # index into generation n of the batch, -1 if extinct

    def __getitem__(self, r: int) -> MinPath:
        return MinPath(self.values[r], int(self.argmin_count[r]), int(self.chosen_index[r]), int(self.particle[r]))


def _min_keys(gen: Generation) -> np.ndarray:
    return gen.coord if gen.coord is not None else gen.position


def leftmost_paths(batch: BatchRun, rng: np.random.Generator) -> MinPaths:
    """Path to a uniformly chosen leftmost particle, for every replica."""
    n, R = batch.n, batch.replicas
    last = batch.generations[n]
    key = _min_keys(last)
    big = np.iinfo(np.int64).max if key.dtype.kind == "i" else np.inf
    mins = np.full(R, big, dtype=key.dtype)
    np.minimum.at(mins, last.replica, key)
    is_min = key == mins[last.replica]
    count = np.bincount(last.replica[is_min], minlength=R)
    alive = count > 0
    rank = np.zeros(R, dtype=np.int64)
    rank[alive] = rng.integers(0, count[alive])
    which = np.flatnonzero(is_min)
    start = np.cumsum(count) - count
    idx = np.full(R, -1, dtype=np.int64)
    idx[alive] = which[start[alive] + rank[alive]]
    values = np.full((R, n + 1), np.nan)
    values[alive, 0] = 0.0
    cur = idx[alive]
    for g in range(n, 0, -1):
        gen = batch.generations[g]
        values[alive, g] = gen.position[cur]
        cur = gen.parent[cur]
    return MinPaths(values, count, np.where(alive, rank, -1), idx)


def leftmost_path(run: TreeRun, rng: np.random.Generator) -> MinPath:
    if run.extinct_at is not None or len(run.positions[-1]) == 0:
        raise ExtinctError("the tree is extinct; the leftmost particle is undefined")
    n = run.n
    key = run.coords[n] if run.coords is not None else run.positions[n]
    which = np.flatnonzero(key == key.min())
    rank = int(rng.integers(0, len(which)))
    i = int(which[rank])
    values = np.zeros(n + 1)
    cur = i
    for g in range(n, 0, -1):
        values[g] = run.positions[g][cur]
        cur = run.parents[g][cur]
    return MinPath(values, len(which), rank, i)


def rescale_path(path: MinPath | np.ndarray, sigma: float, grid_points: int) -> PathGrid:
    """s -> I_n(floor(s n)) / (sigma sqrt(n)) on ``grid_points`` equispaced s."""
    values = path.values if isinstance(path, MinPath) else np.asarray(path, dtype=float)
    n = len(values) - 1
    if n < 1:
        raise ValueError("rescaling needs n >= 1")
    if grid_points < 2:
        raise ValueError("grid_points must be at least 2")
    i = np.arange(grid_points)
    k = (i * n) // (grid_points - 1)
    return PathGrid(values[k] / (sigma * math.sqrt(n)))


def rescale_paths(values: np.ndarray, sigma: float, grid_points: int) -> np.ndarray:
    """Row-wise :func:`rescale_path` for an array of paths."""
    n = values.shape[1] - 1
    if n < 1:
        raise ValueError("rescaling needs n >= 1")
    k = (np.arange(grid_points) * n) // (grid_points - 1)
    return values[:, k] / (sigma * math.sqrt(n))


# ---------------------------------------------------------------------------
# killed minimum and stopping lines on a tree


def killed_min(run: TreeRun) -> float | None:
    """Minimum at generation n over particles whose whole path stays >= 0."""
    alive = np.array([True])
    for g in range(1, run.n + 1):
        alive = alive[run.parents[g]] & (run.positions[g] >= -LATTICE_TOL)
    pos = run.positions[run.n][alive]
    return float(pos.min()) if len(pos) else None


def killed_minima(batch: BatchRun) -> np.ndarray:
    """Killed minimum per replica (+inf when no particle survives the barrier)."""
    alive = np.ones(batch.replicas, dtype=bool)
    for g in range(1, batch.n + 1):
        gen = batch.generations[g]
        alive = alive[gen.parent] & (gen.position >= -LATTICE_TOL)
    last = batch.generations[batch.n]
    out = np.full(batch.replicas, np.inf)
    np.minimum.at(out, last.replica[alive], last.position[alive])
    return out


@dataclass(frozen=True)
class StoppingLine:
    entries: tuple  # (generation, position)
    sum_exp: float  # sum of e^{-V}
    sum_vexp: float  # sum of V e^{-V}
    truncated: bool


def _line_sums(pos: np.ndarray) -> tuple[float, float]:
    e = np.exp(-pos)
    return math.fsum(e.tolist()), math.fsum((pos * e).tolist())


def stopping_line(run: TreeRun, A: float) -> StoppingLine:
    """Particles at or above A whose strict ancestors are all below A."""
    if A < 0:
        raise ValueError("A must be non-negative")
    if A <= 0.0:
        return StoppingLine(((0, 0.0),), 1.0, 0.0, False)
    entries = []
    alive = np.array([True])
    for g in range(1, run.n + 1):
        pos = run.positions[g]
        from_alive = alive[run.parents[g]]
        cross = from_alive & (pos >= A - LATTICE_TOL)
        entries.extend((g, float(x)) for x in pos[cross])
        alive = from_alive & ~cross
    pos = np.array([x for _, x in entries])
    se, sve = _line_sums(pos)
    return StoppingLine(tuple(entries), se, sve, bool(alive.any()))


# ---------------------------------------------------------------------------
# occupation engine


@dataclass(frozen=True, eq=False)
class Occupation:
    """Per-replica occupation counts of one generation."""

    g: int
    replica: np.ndarray
    key: np.ndarray  # lattice coordinate (int) or position (float)
    count: np.ndarray
    lattice: LatticeInfo
    exact: bool

    def positions(self) -> np.ndarray:
        if self.exact:
            return _lattice_positions(self.lattice, self.g, self.key)
        return self.key


def _merge(rep: np.ndarray, key: np.ndarray, cnt: np.ndarray):
    keep = cnt > 0
    rep, key, cnt = rep[keep], key[keep], cnt[keep]
    if len(rep) == 0:
        return rep, key, cnt
    order = np.lexsort((key, rep))
    rep, key, cnt = rep[order], key[order], cnt[order]
    new = np.ones(len(rep), dtype=bool)
    new[1:] = (rep[1:] != rep[:-1]) | (key[1:] != key[:-1])
    group = np.cumsum(new) - 1
    return rep[new], key[new], np.bincount(group, weights=cnt).astype(np.int64)


def root_occupation(tab: OffspringTable, replicas: int, start: float = 0.0) -> Occupation:
    exact = tab.lattice.is_lattice and tab.coords is not None and start == 0.0
    key = np.zeros(replicas, dtype=np.int64) if exact else np.full(replicas, float(start))
    return Occupation(0, np.arange(replicas, dtype=np.int64), key, np.ones(replicas, dtype=np.int64), tab.lattice, exact)


def occupation_step(tab: OffspringTable, occ: Occupation, rng: np.random.Generator) -> Occupation:
    kids = draw_child_counts(tab, occ.count, rng)  # (groups, values)
    nv = len(tab.values)
    rep = np.repeat(occ.replica, nv)
    if occ.exact:
        key = (occ.key[:, None] + tab.coords[None, :]).ravel()
    else:
        key = (occ.key[:, None] + tab.values[None, :]).ravel()
    rep, key, cnt = _merge(rep, key, kids.ravel())
    return Occupation(occ.g + 1, rep, key, cnt, occ.lattice, occ.exact)


def occupation_min_W(occ: Occupation, replicas: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-replica minimum (+inf if empty) and log W of an occupation."""
    pos = occ.positions()
    mins = np.full(replicas, np.inf)
    np.minimum.at(mins, occ.replica, pos)
    logw = np.full(replicas, -np.inf)
    if len(pos):
        # shift by the replica minimum so every exponent is <= 0
        shifted = np.bincount(occ.replica, weights=occ.count * np.exp(mins[occ.replica] - pos), minlength=replicas)
        ok = shifted > 0
        logw[ok] = np.log(shifted[ok]) - mins[ok]
    return mins, logw


def simulate_occupation(law: OffspringLaw, n: int, replicas: int, rng: np.random.Generator) -> Occupation:
    tab = offspring_table(law)
    occ = root_occupation(tab, replicas)
    for _ in range(n):
        occ = occupation_step(tab, occ, rng)
    return occ


@dataclass(frozen=True, eq=False)
class LineSample:
    sum_exp: np.ndarray
    sum_vexp: np.ndarray
    entries: np.ndarray  # number of particles on the line
    depth: np.ndarray  # last generation that produced a line entry
    truncated: np.ndarray  # some ray neither crossed A nor died by max_generations


def sample_stopping_lines(
    law: OffspringLaw,
    A: float,
    replicas: int,
    rng: np.random.Generator,
    max_generations: int = 100_000,
) -> LineSample:
    """Sums over the stopping line at level A for independent trees.

    Only the particles that have not crossed A yet are simulated, as
    occupation counts.
    """
    if A < 0:
        raise ValueError("A must be non-negative")
    se = np.zeros(replicas)
    sve = np.zeros(replicas)
    entries = np.zeros(replicas, dtype=np.int64)
    depth = np.zeros(replicas, dtype=np.int64)
    if A <= 0.0:
        return LineSample(se + 1.0, sve, entries + 1, depth, np.zeros(replicas, dtype=bool))
    tab = offspring_table(law)
    occ = root_occupation(tab, replicas)
    for _ in range(max_generations):
        if len(occ.count) == 0:
            break
        occ = occupation_step(tab, occ, rng)
        pos = occ.positions()
        cross = pos >= A - LATTICE_TOL
        if cross.any():
            r = occ.replica[cross]
            c = occ.count[cross]
            e = np.exp(-pos[cross])
            se += np.bincount(r, weights=c * e, minlength=replicas)
            sve += np.bincount(r, weights=c * pos[cross] * e, minlength=replicas)
            entries += np.bincount(r, weights=c, minlength=replicas).astype(np.int64)
            depth[np.unique(r)] = occ.g
        stay = ~cross
        occ = Occupation(occ.g, occ.replica[stay], occ.key[stay], occ.count[stay], occ.lattice, occ.exact)
    truncated = np.zeros(replicas, dtype=bool)
    truncated[occ.replica] = True
    return LineSample(se, sve, entries, depth, truncated)


# ---------------------------------------------------------------------------
# levels and path diagnostics


def a_n(z: float, n: int, lat: LatticeInfo) -> float:
    """Level a_n(z): 1.5 ln n - z, or its lattice version."""
    if n < 1:
        raise ValueError("n must be >= 1")
    base = 1.5 * math.log(n)
    if not lat.is_lattice:
        return base - z
    alpha, beta = lat.offset, lat.span
    j = math.floor((base - alpha * n) / beta + 1e-12)
    return alpha * n + beta * j - z


def snap_to_span(z: float, lat: LatticeInfo) -> float:
    """Smallest element of beta Z that is >= z (lattice laws only)."""
    if not lat.is_lattice:
        return z
    return lat.span * math.ceil(z / lat.span - 1e-9)


@dataclass(frozen=True)
class PathMembership:
    endpoint_below: bool  # V(u) <= a_n(z)
    stays_above: bool  # min_k V(u_k) >= -z + K
    late_above: bool  # min over ceil(delta n)..n >= a_n(z + L)

    @property
    def member(self) -> bool:
        return self.endpoint_below and self.stays_above and self.late_above


def path_diagnostics(path: MinPath | np.ndarray, z: float, K: float, L: float, delta: float, lat: LatticeInfo) -> PathMembership:
    v = path.values if isinstance(path, MinPath) else np.asarray(path, dtype=float)
    n = len(v) - 1
    level = a_n(z, n, lat)
    late = v[math.ceil(delta * n - 1e-12) :]
    return PathMembership(
        bool(v[-1] <= level + LATTICE_TOL),
        bool(v.min() >= -z + K - LATTICE_TOL),
        bool(late.min() >= a_n(z + L, n, lat) - LATTICE_TOL),
    )


def expected_records(law: OffspringLaw, n: int) -> float:
    """Expected number of particle records of a tree grown to generation n."""
    m = law.mean_offspring
    if m == 1.0:
        return float(n + 1)
    return (m ** (n + 1) - 1.0) / (m - 1.0)
