"""Seeded desk-scale experiments.

Each experiment takes an :class:`ExperimentConfig` and returns an
:class:`Outcome`: a JSON summary, CSV tables and a pass/fail verdict.
Replicas are split into fixed blocks, every block draws from its own
counter-based stream (see :mod:`brwx.rng`), blocks run on a process pool and
are gathered back in block order, so outputs do not depend on the number of
workers.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import brw, exact, rwalk, spine
from . import excursion as exc
from .minpath import LatticeMinSampler
from .model import (
    LATTICE_TOL,
    LawFileError,
    OffspringLaw,
    check_boundary,
    law_from_dict,
    law_to_dict,
    lattice_structure,
    load_law,
    model_zoo,
    sigma,
)
from .rng import (
    DEFAULT_CHUNK,
    STREAM_DIRECT,
    STREAM_EXCURSION,
    STREAM_LINES,
    STREAM_RECURSIVE,
    STREAM_SPINE,
    STREAM_TREE,
    chunks,
    replica_rng,
)
from .stats import EmpiricalSample, ks_one_sample, ks_two_sample, mean_jackknife

SCHEMA = "#schema=1"
EXCURSION_MEAN_HALF = 2.0 / math.sqrt(2.0 * math.pi)


class ConfigError(ValueError):
    """Invalid configuration or input (exit code 2)."""


class InsufficientSample(RuntimeError):
    """Too few replicas satisfied the conditioning event."""


DEFAULTS: dict[str, dict] = {
    "theorem": {
        "model": {"family": "cosh", "m": 1.2},
        "n": [32, 64, 128],
        "replicas": 500,
        "params": {"grid": 17, "s": [0.25, 0.5, 0.75], "engine": "auto", "kmax": 64,
                   "reference_samples": 10_000, "midpoint_tol": 0.35},
    },
    "tail": {
        "model": {"family": "cosh", "m": 2},
        "n": [18],
        "replicas": 20_000,
        "params": {"z": [2, 3, 4], "z_unit": "sigma", "factor": 2.0, "overlap_k": 3.0},
    },
    "conditioned": {
        "model": {"family": "cosh", "m": 2},
        "n": [18],
        "replicas": 500,
        "params": {"z": 2, "z_unit": "sigma", "delta": [0.5, 1.0], "probe_delta": 0.1,
                   "min_accepted": 200, "attempt_factor": 10_000, "batch": 1000, "mean_tol": 0.35},
    },
    "lines": {
        "model": {"family": "cosh", "m": 2},
        "n": [],
        "replicas": 100_000,
        "params": {"A": [0, 1, 2, 4], "max_generations": 100_000, "k": 3.0},
    },
    "excursion": {
        "model": {},
        "n": [],
        "replicas": 100_000,
        "params": {"grid": 257, "delta": [0.25, 0.5], "paths": 4, "mean_tol": 0.01,
                   "identity_tol": 0.02, "alpha": 0.01},
    },
    "walk": {
        "model": {"family": "cosh", "m": 2},
        "n": [100, 1000, 10_000],
        "replicas": 0,
        "params": {"x": [0, 1, 2, 3, 4, 5], "x_unit": "unit", "k_max": 1_000_000},
    },
}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int
    model: dict
    n: tuple
    replicas: int
    params: dict
    caps: dict = field(default_factory=lambda: {"max_particles": brw.DEFAULT_MAX_PARTICLES,
                                                "max_batch": brw.DEFAULT_MAX_BATCH})
    chunk: int = DEFAULT_CHUNK

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "model": copy.deepcopy(self.model),
            "n": list(self.n),
            "replicas": self.replicas,
            "params": copy.deepcopy(self.params),
            "caps": dict(self.caps),
            "chunk": self.chunk,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("configuration must be a JSON object")
        name = obj.get("experiment")
        if name not in DEFAULTS:
            raise ConfigError(f"unknown experiment {name!r}")
        if "seed" not in obj or obj["seed"] is None:
            raise ConfigError("a seed is mandatory")
        try:
            seed = int(obj["seed"])
        except (TypeError, ValueError):
            raise ConfigError(f"seed must be an integer, got {obj['seed']!r}") from None
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        base = DEFAULTS[name]
        params = copy.deepcopy(base["params"])
        extra = obj.get("params", {})
        if not isinstance(extra, dict):
            raise ConfigError("params must be an object")
        unknown = sorted(set(extra) - set(params))
        if unknown:
            raise ConfigError(f"unknown parameters for {name}: {', '.join(unknown)}")
        params.update(extra)
        n = obj.get("n", base["n"])
        n = [n] if isinstance(n, int) else list(n)
        if any(not isinstance(k, int) or k < 0 for k in n):
            raise ConfigError("n must be a list of non-negative integers")
        replicas = obj.get("replicas", base["replicas"])
        if not isinstance(replicas, int) or replicas < 0:
            raise ConfigError("replicas must be a non-negative integer")
        caps = {"max_particles": brw.DEFAULT_MAX_PARTICLES, "max_batch": brw.DEFAULT_MAX_BATCH}
        caps.update(obj.get("caps", {}))
        chunk = obj.get("chunk", DEFAULT_CHUNK)
        if not isinstance(chunk, int) or chunk < 1:
            raise ConfigError("chunk must be a positive integer")
        model = obj.get("model", base["model"])
        if not isinstance(model, dict):
            raise ConfigError("model must be an object")
        return cls(name, seed, copy.deepcopy(model), tuple(n), replicas, params, caps, chunk)


def load_config(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc_:
        raise ConfigError(f"cannot read config {path}: {exc_}") from exc_


def model_spec(text: str) -> dict:
    """Model from a command-line token: a law file, a zoo name or ``cosh:<m>``."""
    if Path(text).is_file():
        return {"law_file": text}
    if text.startswith("cosh:"):
        return {"family": "cosh", "m": float(text[5:])}
    if text in model_zoo():
        return {"family": text}
    raise ConfigError(f"unknown model {text!r}")


def resolve_law(model: dict, boundary: bool = True) -> OffspringLaw:
    try:
        if "law_file" in model:
            law = load_law(model["law_file"])
        else:
            law = law_from_dict(model)
    except (OSError, LawFileError) as exc_:
        raise ConfigError(f"bad model: {exc_}") from exc_
    if boundary:
        report = check_boundary(law)
        if not report.passed:
            failed = [k for k, v in report.verdicts.items() if not v]
            raise ConfigError(f"model is not in the boundary case ({', '.join(failed)}; psi(1)={report.psi1:.6g})")
    return law


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


# ---------------------------------------------------------------------------
# outcomes and IO


@dataclass
class Table:
    columns: list
    rows: list


@dataclass
class Outcome:
    summary: dict
    tables: dict  # file name -> Table
    passed: bool


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _cell(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def table_text(table: Table) -> str:
    lines = [SCHEMA, ",".join(table.columns)]
    lines += [",".join(_cell(v) for v in row) for row in table.rows]
    return "\n".join(lines) + "\n"


def summary_text(summary: dict) -> str:
    return json.dumps(_clean(summary), sort_keys=True, indent=2) + "\n"


def write_outcome(outcome: Outcome, out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "summary.json"]
    written[0].write_text(summary_text(outcome.summary), encoding="utf-8")
    for name, table in outcome.tables.items():
        p = out / name
        p.write_text(table_text(table), encoding="utf-8")
        written.append(p)
    return written


def _header(cfg: ExperimentConfig, law: OffspringLaw | None) -> dict:
    head = {
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash,
        "seed": cfg.seed,
        "git_describe": git_describe(),
    }
    if law is not None:
        head["law"] = law_to_dict(law)
        head["sigma"] = sigma(law)
    return head


# ---------------------------------------------------------------------------
# parallel fan-out


def fan_out(fn, tasks: list, workers: int = 1) -> list:
    """``[fn(t) for t in tasks]`` on a process pool; results in task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _z_abs(z: float, unit: str, law: OffspringLaw) -> float:
    if unit == "sigma":
        return z * sigma(law)
    if unit == "abs":
        return float(z)
    if unit == "unit":
        lat = lattice_structure(law)
        if not lat.is_lattice:
            raise ConfigError("z_unit 'unit' needs a lattice law")
        return z * lat.unit
    raise ConfigError(f"unknown z unit {unit!r}")


def _rel_gap(value: float, target: float) -> float:
    return abs(value - target) / abs(target)


# ---------------------------------------------------------------------------
# leftmost-path experiment


@lru_cache(maxsize=4)
def _min_sampler(law: OffspringLaw, n: int, kmax: int) -> LatticeMinSampler:
    return LatticeMinSampler(law, n, kmax)


def _theorem_block(task):
    law, n, sub, lo, hi, seed, engine, kmax, caps = task
    m = hi - lo
    values = np.full((m, n + 1), np.nan)
    counts = np.zeros(m, dtype=np.int64)
    excluded = 0
    rejected = 0
    if engine == "recursive":
        sampler = _min_sampler(law, n, kmax)
        for i in range(m):
            s = sampler.sample(replica_rng(seed, lo + i, STREAM_RECURSIVE, sub))
            values[i] = s.values
            counts[i] = s.argmin_count
        return values, counts, excluded, rejected
    for i in range(m):
        rng = replica_rng(seed, lo + i, STREAM_TREE, sub)
        try:
            while True:
                batch = brw.simulate_batch(law, n, 1, rng, caps)
                if batch.extinct_at[0] < 0:
                    break
                rejected += 1
        except brw.CapExceeded:
            excluded += 1
            continue
        p = brw.leftmost_paths(batch, rng)
        values[i] = p.values[0]
        counts[i] = p.argmin_count[0]
    return values, counts, excluded, rejected


def run_theorem(cfg: ExperimentConfig, workers: int = 1) -> Outcome:
    """Rescaled leftmost path against the normalized excursion along an n-ladder."""
    law = resolve_law(cfg.model)
    p = cfg.params
    G = int(p["grid"])
    s_points = [float(s) for s in p["s"]]
    grid = exc.uniform_grid(G)
    s_idx = []
    for s in s_points:
        i = int(round(s * (G - 1)))
        if not 0.0 < s < 1.0 or abs(grid[i] - s) > 1e-12:
            raise ConfigError(f"s={s} must be an interior point of the {G}-point grid")
        s_idx.append(i)
    lat = lattice_structure(law)
    engine = p["engine"]
    if engine == "auto":
        engine = "recursive" if lat.is_lattice else "forward"
    if engine not in ("recursive", "forward"):
        raise ConfigError(f"unknown engine {engine!r}")
    if engine == "recursive" and not lat.is_lattice:
        raise ConfigError("the recursive engine needs a lattice law")
    if not cfg.n or min(cfg.n) < 1:
        raise ConfigError("theorem needs n >= 1")
    sig = sigma(law)
    caps = brw.Caps(**cfg.caps)
    tasks = [
        (law, n, sub, lo, hi, cfg.seed, engine, int(p["kmax"]), caps)
        for sub, n in enumerate(cfg.n)
        for _, lo, hi in chunks(cfg.replicas, cfg.chunk)
    ]
    results = fan_out(_theorem_block, tasks, workers)
    ref = exc.excursion_values(s_points, int(p["reference_samples"]),
                               replica_rng(cfg.seed, 0, STREAM_EXCURSION), G)
    summary = _header(cfg, law)
    summary["engine"] = engine
    summary["grid"] = {"points": G, "s": [float(x) for x in grid]}
    paths_rows, marg_rows, per_n = [], [], []
    it = iter(results)
    total_excluded = 0
    for sub, n in enumerate(cfg.n):
        parts = [next(it) for _ in chunks(cfg.replicas, cfg.chunk)]
        values = np.concatenate([q[0] for q in parts]) if parts else np.zeros((0, n + 1))
        counts = np.concatenate([q[1] for q in parts]) if parts else np.zeros(0, dtype=np.int64)
        excluded = sum(q[2] for q in parts)
        rejected = sum(q[3] for q in parts)
        total_excluded += excluded
        ok = ~np.isnan(values[:, 0])
        scaled = brw.rescale_paths(values[ok], sig, G) if ok.any() else np.zeros((0, G))
        reps = np.flatnonzero(ok)
        for r, row, k in zip(reps, scaled, counts[ok]):
            paths_rows.append([n, int(r), int(k)] + [float(v) for v in row])
        entry = {"n": n, "replicas": int(ok.sum()), "excluded": excluded, "rejected_extinct": rejected,
                 "tested": n >= 2 and ok.sum() > 0, "marginals": {}}
        if engine == "recursive":
            entry["count_overflow_mass"] = _min_sampler(law, n, int(p["kmax"])).overflow
        if entry["tested"]:
            for j, (s, i) in enumerate(zip(s_points, s_idx)):
                x = scaled[:, i]
                mean, se = mean_jackknife(x)
                ks = ks_two_sample(x, ref[:, j])
                ref_mean = exc.excursion_marginal(s).mean
                entry["marginals"][repr(s)] = {"mean": mean, "se": se, "ks": ks.statistic,
                                               "ks_p": ks.pvalue, "excursion_mean": ref_mean}
                marg_rows.append([n, s, len(x), mean, se, ks.statistic, ks.pvalue, ref_mean])
        per_n.append(entry)
    summary["ladder"] = per_n
    summary["excluded"] = total_excluded
    checks = {}
    tested = [e for e in per_n if e["tested"]]
    if 0.5 in s_points and tested:
        ks_mid = [e["marginals"][repr(0.5)]["ks"] for e in tested]
        summary["ks_midpoint_trend"] = ks_mid
        if len(ks_mid) > 1:
            checks["ks_non_increasing"] = all(b <= a for a, b in zip(ks_mid, ks_mid[1:]))
        last = tested[-1]["marginals"][repr(0.5)]["mean"]
        summary["midpoint_mean_rel_gap"] = _rel_gap(last, EXCURSION_MEAN_HALF)
        checks["midpoint_mean_within_tol"] = summary["midpoint_mean_rel_gap"] <= float(p["midpoint_tol"])
    summary["checks"] = checks
    passed = all(checks.values())
    summary["passed"] = passed
    cols = ["n", "replica", "argmin_count"] + [f"s={x:.6g}" for x in grid]
    tables = {
        "paths.csv": Table(cols, paths_rows),
        "marginals.csv": Table(["n", "s", "replicas", "mean", "se", "ks", "ks_p", "excursion_mean"], marg_rows),
    }
    return Outcome(summary, tables, passed)


# ---------------------------------------------------------------------------
# lower tail of the minimum


def _tail_block(task):
    law, n, levels, chunk, lo, hi, seed = task
    m = hi - lo
    lv = np.asarray(levels)[None, :] + LATTICE_TOL
    occ = brw.simulate_occupation(law, n, m, replica_rng(seed, chunk, STREAM_DIRECT))
    mins, _ = brw.occupation_min_W(occ, m)
    direct = (mins[:, None] <= lv).astype(float)
    qocc = spine.simulate_q_occupation(law, n, m, replica_rng(seed, chunk, STREAM_SPINE))
    qmins, logw = brw.occupation_min_W(qocc, m)
    weighted = np.where(qmins[:, None] <= lv, np.exp(-logw)[:, None], 0.0)
    return direct, weighted


def run_tail(cfg: ExperimentConfig, workers: int = 1) -> Outcome:
    """P(I_n <= a_n(z)) by direct simulation and by importance sampling under Q."""
    law = resolve_law(cfg.model)
    p = cfg.params
    if len(cfg.n) != 1 or cfg.n[0] < 1:
        raise ConfigError("tail needs a single n >= 1")
    if cfg.replicas < 2:
        raise ConfigError("tail needs at least two replicas")
    n = cfg.n[0]
    lat = lattice_structure(law)
    zs = [float(z) for z in p["z"]]
    if not zs:
        raise ConfigError("empty z list")
    z_abs = [_z_abs(z, p["z_unit"], law) for z in zs]
    z_snap = [brw.snap_to_span(z, lat) for z in z_abs]
    levels = [brw.a_n(z, n, lat) for z in z_snap]
    tasks = [(law, n, levels, c, lo, hi, cfg.seed) for c, lo, hi in chunks(cfg.replicas, cfg.chunk)]
    parts = fan_out(_tail_block, tasks, workers)
    direct = np.concatenate([q[0] for q in parts])
    weighted = np.concatenate([q[1] for q in parts])
    summary = _header(cfg, law)
    summary["n"] = n
    summary["excluded"] = 0
    rows, entries = [], []
    for j, z in enumerate(zs):
        pd, sd = mean_jackknife(direct[:, j])
        pi, si = mean_jackknife(weighted[:, j])
        zz = z_snap[j]
        ratio = (lambda q: math.exp(zz) * q / zz) if zz > 0 else (lambda q: math.nan)
        e = {"z": z, "z_abs": z_abs[j], "z_snapped": zz, "level": levels[j],
             "direct": {"estimate": pd, "se": sd, "ratio": ratio(pd)},
             "importance": {"estimate": pi, "se": si, "ratio": ratio(pi)}}
        e["overlap"] = abs(pd - pi) <= float(p["overlap_k"]) * (sd + si)
        entries.append(e)
        rows.append([z, zz, levels[j], "direct", pd, sd, ratio(pd)])
        rows.append([z, zz, levels[j], "importance", pi, si, ratio(pi)])
    summary["z"] = entries
    checks = {}
    ratios = [e["importance"]["ratio"] for e in entries if e["z_snapped"] > 0]
    if len(ratios) > 1:
        spread = max(ratios) / min(ratios) if min(ratios) > 0 else math.inf
        summary["ratio_spread"] = spread
        checks["ratios_within_factor"] = spread <= float(p["factor"])
    positive = [e for e in entries if e["z_snapped"] > 0]
    if positive:
        checks["estimators_overlap"] = positive[0]["overlap"]
    for e in entries:
        if e["z_snapped"] == 0:
            checks["zero_level_sanity"] = 0.0 < e["direct"]["estimate"] < 1.0
    summary["checks"] = checks
    passed = all(checks.values())
    summary["passed"] = passed
    tables = {"marginals.csv": Table(["z", "z_snapped", "level", "estimator", "estimate", "se", "ratio"], rows)}
    return Outcome(summary, tables, passed)


# ---------------------------------------------------------------------------
# conditioned leftmost path


def _conditioned_block(task):
    law, n, level, batch, chunk, seed, caps = task
    rng = replica_rng(seed, chunk, STREAM_TREE)
    try:
        run = brw.simulate_batch(law, n, batch, rng, caps, prune_level=level)
    except brw.CapExceeded:
        return np.zeros((0, n + 1)), np.zeros(0, dtype=np.int64), batch
    ok = run.I[:, n] <= level + LATTICE_TOL
    paths = brw.leftmost_paths(run, rng)
    return paths.values[ok], paths.argmin_count[ok], 0


def run_conditioned(cfg: ExperimentConfig, workers: int = 1) -> Outcome:
    """Leftmost path conditioned on {I_n <= a_n(z)} by rejection with exact pruning."""
    law = resolve_law(cfg.model)
    p = cfg.params
    if len(cfg.n) != 1 or cfg.n[0] < 2:
        raise ConfigError("conditioned needs a single n >= 2")
    n = cfg.n[0]
    target = cfg.replicas
    if target < 1:
        raise ConfigError("replicas must be positive")
    deltas = [float(d) for d in p["delta"]]
    if any(not 0.0 < d <= 1.0 for d in deltas):
        raise ConfigError("delta must lie in (0, 1]")
    lat = lattice_structure(law)
    z = brw.snap_to_span(_z_abs(float(p["z"]), p["z_unit"], law), lat)
    level = brw.a_n(z, n, lat)
    caps = brw.Caps(**cfg.caps)
    batch = int(p["batch"])
    max_attempts = int(p["attempt_factor"]) * target
    min_accepted = int(p["min_accepted"])
    dmin = brw.offspring_table(law).min_displacement
    impossible = level < n * dmin - LATTICE_TOL
    kept_v, kept_k = [], []
    attempts = excluded = accepted = 0
    chunk = 0
    wave = max(workers, 1)
    while not impossible and accepted < target and attempts < max_attempts:
        tasks = [(law, n, level, batch, chunk + i, cfg.seed, caps) for i in range(wave)]
        for v, k, ex_ in fan_out(_conditioned_block, tasks, workers):
            if accepted >= target or attempts >= max_attempts:
                break
            attempts += batch
            excluded += ex_
            kept_v.append(v)
            kept_k.append(k)
            accepted += len(v)
        chunk += wave
    if accepted < min_accepted:
        raise InsufficientSample(
            f"only {accepted} of {attempts} attempts satisfied I_n <= {level:.6g} (need {min_accepted})"
        )
    values = np.concatenate(kept_v)[:target]
    counts = np.concatenate(kept_k)[:target]
    sig = sigma(law)
    scale = sig * math.sqrt(n)
    summary = _header(cfg, law)
    summary.update({"n": n, "z_snapped": z, "level": level, "attempts": attempts, "accepted": len(values),
                    "acceptance_rate": accepted / attempts, "excluded": excluded})
    rows, out, checks = [], [], {}
    for d in deltas:
        s = d / 2.0
        x = values[:, math.floor(s * n + 1e-12)] / scale
        marg = exc.excursion_marginal(s)
        ks = ks_one_sample(x, marg.cdf)
        mean, se = mean_jackknife(x)
        e = {"delta": d, "s": s, "mean": mean, "se": se, "excursion_mean": marg.mean,
             "rel_gap": _rel_gap(mean, marg.mean), "ks": ks.statistic, "ks_p": ks.pvalue,
             "tightness_assisted": d >= 1.0}
        if d >= 1.0:
            k = math.floor(float(p["probe_delta"]) * n + 1e-12)
            tail = values[:, n - k :]
            sup = np.max(np.abs(tail - values[:, -1:]), axis=1)
            e["endpoint_probe"] = {"delta": float(p["probe_delta"]), "k_max": k,
                                   "mean": float(sup.mean()), "mean_rescaled": float(sup.mean() / scale),
                                   "q90_rescaled": float(np.quantile(sup, 0.9) / scale)}
        else:
            checks[f"mean_within_tol_delta={d:g}"] = e["rel_gap"] <= float(p["mean_tol"])
        out.append(e)
        rows.append([d, s, len(x), mean, se, ks.statistic, ks.pvalue, marg.mean])
    summary["deltas"] = out
    summary["checks"] = checks
    passed = all(checks.values())
    summary["passed"] = passed
    g = np.arange(n + 1)
    path_rows = [[r, int(counts[r])] + [float(v) for v in values[r]] for r in range(len(values))]
    tables = {
        "paths.csv": Table(["replica", "argmin_count"] + [f"g={k}" for k in g], path_rows),
        "marginals.csv": Table(["delta", "s", "replicas", "mean", "se", "ks", "ks_p", "excursion_mean"], rows),
    }
    return Outcome(summary, tables, passed)


# ---------------------------------------------------------------------------
# stopping lines


def _lines_block(task):
    law, As, chunk, lo, hi, seed, max_gen = task
    out = []
    for j, A in enumerate(As):
        ls = brw.sample_stopping_lines(law, A, hi - lo, replica_rng(seed, chunk, STREAM_LINES, j), max_gen)
        out.append((ls.sum_exp, ls.sum_vexp, ls.truncated, ls.depth))
    return out


def run_lines(cfg: ExperimentConfig, workers: int = 1) -> Outcome:
    """Sums of e^{-V} and V e^{-V} over the first-crossing line of level A."""
    law = resolve_law(cfg.model)
    p = cfg.params
    As = [float(a) for a in p["A"]]
    if not As or any(a < 0 for a in As):
        raise ConfigError("A must be a non-empty list of non-negative levels")
    if cfg.replicas < 2:
        raise ConfigError("lines needs at least two replicas")
    k = float(p["k"])
    tasks = [(law, As, c, lo, hi, cfg.seed, int(p["max_generations"])) for c, lo, hi in chunks(cfg.replicas, cfg.chunk)]
    parts = fan_out(_lines_block, tasks, workers)
    summary = _header(cfg, law)
    rows, entries, checks = [], [], {}
    total_excluded = 0
    for j, A in enumerate(As):
        se_ = np.concatenate([q[j][0] for q in parts])
        sve = np.concatenate([q[j][1] for q in parts])
        trunc = np.concatenate([q[j][2] for q in parts])
        depth = np.concatenate([q[j][3] for q in parts])
        keep = ~trunc
        total_excluded += int(trunc.sum())
        m1, s1 = mean_jackknife(se_[keep])
        m2, s2 = mean_jackknife(sve[keep])
        e = {"A": A, "replicas": int(keep.sum()), "excluded": int(trunc.sum()), "mean_exp": m1, "se_exp": s1,
             "mean_vexp": m2, "se_vexp": s2, "max_depth": int(depth.max(initial=0)),
             "max_exp": float(se_.max(initial=0.0))}
        if A == 0:
            e["exact_unit"] = bool(np.all(se_ == 1.0) and np.all(sve == 0.0))
            checks["A=0_exact"] = e["exact_unit"]
        else:
            e["z_score"] = (m1 - 1.0) / s1 if s1 > 0 else math.inf
            checks[f"A={A:g}_mean_within_{k:g}se"] = abs(m1 - 1.0) <= k * s1
        entries.append(e)
        rows.append([A, e["replicas"], e["excluded"], m1, s1, m2, s2, e["max_depth"]])
    summary["lines"] = entries
    summary["vexp_trend"] = [e["mean_vexp"] for e in entries]
    summary["excluded"] = total_excluded
    summary["checks"] = checks
    passed = all(checks.values())
    summary["passed"] = passed
    tables = {"marginals.csv": Table(
        ["A", "replicas", "excluded", "mean_exp", "se_exp", "mean_vexp", "se_vexp", "max_depth"], rows)}
    return Outcome(summary, tables, passed)


# ---------------------------------------------------------------------------
# reference laws, walks and exact oracles


def run_excursion(cfg: ExperimentConfig, workers: int = 1) -> Outcome:
    """Excursion and meander samplers against their closed forms and identities."""
    p = cfg.params
    G = int(p["grid"])
    N = cfg.replicas
    if N < 2:
        raise ConfigError("excursion needs at least two samples")
    alpha = float(p["alpha"])
    rng = replica_rng(cfg.seed, 0, STREAM_EXCURSION)
    summary = _header(cfg, None)
    checks = {}
    half = exc.excursion_values([0.5], N, rng, G)[:, 0]
    mean, se = mean_jackknife(half)
    ks = ks_one_sample(half, exc.excursion_marginal(0.5).cdf)
    ks_limit = 1.5 * 1.95 / math.sqrt(N)
    summary["midpoint"] = {"mean": mean, "se": se, "target": EXCURSION_MEAN_HALF,
                           "rel_gap": _rel_gap(mean, EXCURSION_MEAN_HALF), "ks": ks.statistic, "ks_p": ks.pvalue,
                           "ks_limit": ks_limit}
    checks["midpoint_mean"] = summary["midpoint"]["rel_gap"] <= float(p["mean_tol"])
    checks["midpoint_ks"] = ks.statistic < ks_limit
    ident = []
    for d in p["delta"]:
        r = exc.meander_excursion_identity(float(d), exc.const_one, N, rng, G)
        e = {"delta": float(d), "lhs": r.lhs, "rhs": r.rhs, "se_lhs": r.se_lhs, "se_rhs": r.se_rhs,
             "target": exc.SQRT_HALF_PI}
        ok = all(_rel_gap(v, exc.SQRT_HALF_PI) <= float(p["identity_tol"]) for v in (r.lhs, r.rhs))
        checks[f"identity_delta={float(d):g}"] = ok
        ident.append(e)
    summary["identity"] = ident
    restr = []
    for d in p["delta"]:
        d = float(d)
        times, vals, w = exc.bessel_restriction(d, N, rng, G)
        e_ref = exc.excursion_values([d], N, rng, G)[:, 0]
        ks2 = ks_two_sample(EmpiricalSample(vals[:, -1], w), e_ref)
        restr.append({"delta": d, "ks": ks2.statistic, "ks_p": ks2.pvalue,
                      "n_eff": EmpiricalSample(vals[:, -1], w).n_eff})
        checks[f"restriction_delta={d:g}"] = ks2.pvalue > alpha
    summary["restriction"] = restr
    summary["excluded"] = 0
    summary["checks"] = checks
    passed = all(checks.values())
    summary["passed"] = passed
    grid = exc.uniform_grid(G)
    paths = exc.excursions(G, int(p["paths"]), rng)
    rows = [[i, float(s), float(v)] for i, path in enumerate(paths) for s, v in zip(grid, path)]
    return Outcome(summary, {"paths.csv": Table(["path", "s", "value"], rows)}, passed)


def run_walk(cfg: ExperimentConfig, workers: int = 1) -> Outcome:
    """Renewal function and stay-positive probabilities of the associated walk."""
    law = resolve_law(cfg.model)
    p = cfg.params
    step = rwalk.step_law(law)
    unit = step.lattice.unit if p["x_unit"] == "unit" else 1.0
    rows = []
    for x in p["x"]:
        r, bound = rwalk.renewal_R(step, float(x) * unit, int(p["k_max"]), return_bound=True)
        rows.append([float(x) * unit, r, bound])
    surv = []
    for n in cfg.n:
        pr = rwalk.survival_prob(step, n)
        surv.append({"n": n, "prob": pr, "sqrt_n_prob": math.sqrt(n) * pr})
    summary = _header(cfg, law)
    summary["step_law"] = {repr(k): v for k, v in step.as_dict().items()}
    summary["renewal"] = [{"x": a, "R": b, "bound": c} for a, b, c in rows]
    summary["survival"] = surv
    summary["excluded"] = 0
    summary["checks"] = {}
    summary["passed"] = True
    return Outcome(summary, {"renewal.csv": Table(["x", "R", "bound"], rows)}, True)


ORACLE_FIXTURES = ("cosh2", "bin2")
ORACLE_TOL = {"martingale": 1e-12, "many_to_one": 1e-10, "q_total_mass": 1e-12, "q_reweighting": 1e-12,
              "q_posterior": 1e-12, "q_joint": 1e-12, "spine_walk_tv": 1e-12}


@dataclass(frozen=True)
class OracleRow:
    fixture: str
    n: int
    check: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.value <= self.tol


def run_oracle(fixtures=ORACLE_FIXTURES, max_n: int = 3, inject_bug: bool = False) -> list[OracleRow]:
    """Every exact identity on every fixture for n = 1..max_n."""
    fixtures = list(fixtures)
    if not fixtures:
        raise ConfigError("empty fixture list")
    zoo = model_zoo()
    unknown = [f for f in fixtures if f not in zoo]
    if unknown:
        raise ConfigError(f"unknown fixtures: {', '.join(unknown)}")
    sign = -1.0 if inject_bug else 1.0
    rows = []
    for name in fixtures:
        law = zoo[name]
        for n in range(1, max_n + 1):
            q = exact.q_law_checks(law, n, weight_sign=sign)
            vals = {
                "martingale": abs(exact.mean_W(law, n) - 1.0),
                "many_to_one": exact.many_to_one_defect(law, n),
                "q_total_mass": abs(q.total_mass - 1.0),
                "q_reweighting": q.reweighting,
                "q_posterior": q.posterior,
                "q_joint": q.joint,
                "spine_walk_tv": q.spine_walk_tv,
            }
            rows += [OracleRow(name, n, k, float(v), ORACLE_TOL[k]) for k, v in vals.items()]
    return rows


RUNNERS = {
    "theorem": run_theorem,
    "tail": run_tail,
    "conditioned": run_conditioned,
    "lines": run_lines,
    "excursion": run_excursion,
    "walk": run_walk,
}


def run(cfg: ExperimentConfig, workers: int = 1) -> Outcome:
    return RUNNERS[cfg.experiment](cfg, workers)
