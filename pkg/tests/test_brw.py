from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats as sps

from brwx import brw
from brwx.brw import (
    CapExceeded,
    Caps,
    ExtinctError,
    a_n,
    killed_min,
    killed_minima,
    leftmost_path,
    leftmost_paths,
    occupation_min_W,
    path_diagnostics,
    rescale_path,
    rescale_paths,
    sample_stopping_lines,
    simulate,
    simulate_batch,
    simulate_occupation,
    snap_to_span,
    stopping_line,
)
from brwx.exact import exact_min_cdf, exact_stopping_line
from brwx.model import LatticeInfo, atoms_law, lattice_structure
from brwx.rwalk import step_law
from brwx.stats import chi_square_uniform

from conftest import C2, P2, binom_ci, one_child

NONLATTICE = LatticeInfo("non-lattice", 0.0, 0.0)


def test_simulate_one_generation(cosh2, rng):
    run = simulate(cosh2, 1, rng)
    assert len(run.positions[1]) == 2
    assert run.W[0] == 1.0 and run.I[0] == 0.0
    n = 200_000
    batch = simulate_batch(cosh2, 1, n, rng)
    top = 2 * (2 + math.sqrt(3))
    both_down = np.isclose(batch.W[:, 1], top, rtol=0, atol=1e-12)
    assert abs(both_down.mean() - P2**2) <= binom_ci(P2**2, n)
    assert np.all(np.isclose(batch.W[:, 1], top) | (batch.W[:, 1] < top))


def test_tree_invariants(cosh2, rng):
    run = simulate(cosh2, 6, rng)
    lat = lattice_structure(cosh2)
    assert run.positions[0].tolist() == [0.0]
    for g in range(1, run.n + 1):
        par = run.parents[g]
        assert np.all((par >= 0) & (par < len(run.positions[g - 1])))
        assert run.I[g] == run.positions[g].min()
        assert run.W[g] == pytest.approx(np.exp(-run.positions[g]).sum(), rel=1e-12)
        j = (run.positions[g] - lat.offset * g) / lat.span
        assert np.array_equal(j, np.round(j))
        assert np.array_equal(run.coords[g], np.round(j).astype(np.int64))


def _second_moment_W(law, n):
    """E[W_n^2] from W_{g+1} = sum_i e^{-x_i} W^(i)_g with independent copies."""
    a = b = 0.0
    for p, kids in law.expand().atoms:
        e = np.exp(-np.asarray(kids, dtype=float))
        a += p * float(np.sum(e * e))
        b += p * float(np.sum(e) ** 2 - np.sum(e * e))
    m2 = 1.0
    for _ in range(n):
        m2 = a * m2 + b
    return m2


@pytest.mark.parametrize("name", ["cosh2", "bin2", "tri"])
def test_martingale_mean_W10(zoo, name):
    # W_10 is heavy tailed, so the sample SE understates the spread; use the exact one
    replicas = 100_000
    occ = simulate_occupation(zoo[name], 10, replicas, np.random.default_rng(31))
    _, logw = occupation_min_W(occ, replicas)
    w = np.exp(logw)
    se = math.sqrt((_second_moment_W(zoo[name], 10) - 1.0) / replicas)
    assert abs(w.mean() - 1.0) <= 3 * se


def test_extinct_law(rng):
    dead = atoms_law([(1.0, ())], name="dead")
    run = simulate(dead, 5, rng)
    assert run.extinct_at == 1
    assert run.I[0] == 0.0 and len(run.positions) == 2 and not math.isfinite(run.I[1])
    with pytest.raises(ExtinctError):
        leftmost_path(run, rng)


def test_cap_exceeded(cosh2, rng):
    with pytest.raises(CapExceeded) as info:
        simulate(cosh2, 12, rng, caps=Caps(max_particles=1000))
    assert info.value.generation <= 9


def test_leftmost_path_examples(cosh2, rng):
    assert leftmost_path(simulate(cosh2, 0, rng), rng).values.tolist() == [0.0]
    run = simulate(one_child(1.0), 7, rng)
    assert leftmost_path(run, rng).values.tolist() == [float(k) for k in range(8)]


def test_leftmost_path_endpoint_and_chain(cosh2, rng):
    batch = simulate_batch(cosh2, 8, 300, rng)
    paths = leftmost_paths(batch, rng)
    assert np.array_equal(paths.values[:, -1], batch.I[:, -1])
    for r in (0, 17, 299):
        run = brw.tree_of(batch, r)
        p = paths[r]
        i = int(np.flatnonzero(batch.generations[8].replica == r).tolist().index(p.particle))
        for g in range(8, 0, -1):
            assert p.values[g] == run.positions[g][i]
            i = run.parents[g][i]


def test_min_I2_frequency(cosh2):
    exact = exact_min_cdf(cosh2, 2)
    p = exact.pmf(-2 * C2)
    replicas = 1_000_000
    occ = simulate_occupation(cosh2, 2, replicas, np.random.default_rng(12))
    mins, _ = occupation_min_W(occ, replicas)
    freq = np.mean(np.isclose(mins, -2 * C2, atol=1e-9))
    assert abs(freq - p) <= binom_ci(p, replicas)


def test_min_I2_frequency_via_paths(cosh2, rng):
    p = exact_min_cdf(cosh2, 2).pmf(-2 * C2)
    n = 100_000
    batch = simulate_batch(cosh2, 2, n, rng)
    vals = leftmost_paths(batch, rng).values[:, -1]
    freq = np.mean(np.isclose(vals, -2 * C2, atol=1e-9))
    assert abs(freq - p) <= binom_ci(p, n)


def test_tie_break_uniform(cosh2):
    rng = np.random.default_rng(13)
    by_count: dict[int, Counter] = {}
    for _ in range(5):
        batch = simulate_batch(cosh2, 6, 20_000, rng)
        mp = leftmost_paths(batch, rng)
        for k, c in zip(mp.argmin_count.tolist(), mp.chosen_index.tolist()):
            by_count.setdefault(k, Counter())[c] += 1
    tested = 0
    for k, ctr in by_count.items():
        total = sum(ctr.values())
        if k < 2 or total < 5 * k:
            continue
        res = chi_square_uniform([ctr.get(i, 0) for i in range(k)])
        assert res.pvalue > 0.001, (k, ctr)
        tested += 1
    assert tested >= 2


def test_rescale_examples():
    g = rescale_path(np.array([0.0, 1.0, 2.0]), 1.0, 3)
    assert np.allclose(g.values, [0.0, 1 / math.sqrt(2), 2 / math.sqrt(2)], atol=1e-15)
    assert np.all(rescale_path(np.zeros(11), 1.3, 7).values == 0.0)
    with pytest.raises(ValueError):
        rescale_path(np.zeros(1), 1.0, 3)


def test_rescale_refinement(rng):
    path = np.concatenate([[0.0], np.cumsum(rng.normal(size=300))])
    fine = rescale_path(path, 1.0, 1025).values
    coarse = rescale_path(path, 1.0, 513).values
    assert np.array_equal(fine[::2], coarse)
    rows = rescale_paths(np.vstack([path, -path]), 1.0, 513)
    assert np.array_equal(rows[0], coarse)


def test_killed_min_examples(cosh2, rng):
    assert killed_min(simulate(cosh2, 0, rng)) == 0.0
    assert killed_min(simulate(one_child(-1.0), 3, rng)) is None


def test_killed_min_n2_law(cosh2):
    exact = exact_min_cdf(cosh2, 2, killed=True)
    rng = np.random.default_rng(14)
    counts = Counter()
    total = 0
    for _ in range(4):
        batch = simulate_batch(cosh2, 2, 250_000, rng)
        km = killed_minima(batch)
        keys = np.where(np.isfinite(km), np.rint(km / C2), 99).astype(int)
        counts.update(Counter(keys.tolist()))
        total += len(km)
    assert total == 1_000_000
    for v, p in zip(exact.values, exact.probs):
        freq = counts[int(round(v / C2))] / total
        assert abs(freq - p) <= binom_ci(p, total)
    assert abs(counts[99] / total - exact.missing) <= binom_ci(exact.missing, total)


def test_stopping_line_zero(cosh2, rng):
    line = stopping_line(simulate(cosh2, 4, rng), 0.0)
    assert line.entries == ((0, 0.0),) and line.sum_exp == 1.0 and line.sum_vexp == 0.0
    s = sample_stopping_lines(cosh2, 0.0, 1000, rng)
    assert np.all(s.sum_exp == 1.0) and np.all(s.sum_vexp == 0.0)


def test_stopping_line_entries_invariant(cosh2, rng):
    run = simulate(cosh2, 8, rng)
    A = 2 * C2
    line = stopping_line(run, A)
    expected = []
    for g in range(1, run.n + 1):
        for i, x in enumerate(run.positions[g]):
            cur, ok = i, x >= A - 1e-9
            for h in range(g, 1, -1):
                cur = run.parents[h][cur]
                ok = ok and run.positions[h - 1][cur] < A - 1e-9
            if ok:
                expected.append((g, float(x)))
    assert sorted(line.entries) == sorted(expected)
    assert line.sum_exp == pytest.approx(sum(math.exp(-x) for _, x in expected), rel=1e-12)


def test_stopping_line_law_n3(cosh2):
    A, n = C2, 3
    exact = exact_stopping_line(cosh2, n, A)
    rng = np.random.default_rng(15)
    replicas = 20_000
    emp = Counter()
    for _ in range(replicas):
        line = stopping_line(simulate(cosh2, n, rng), A)
        key = (tuple(sorted((g, round(x, 9)) for g, x in line.entries)), line.truncated)
        emp[key] += 1
    assert set(emp) <= set(exact)
    # chi-square goodness of fit, lumping cells with small expectation
    cells = sorted(exact.items(), key=lambda kv: -kv[1])
    obs, exp, rest_o, rest_e = [], [], 0, 0.0
    for key, p in cells:
        if p * replicas >= 5:
            obs.append(emp.get(key, 0))
            exp.append(p * replicas)
        else:
            rest_o += emp.get(key, 0)
            rest_e += p * replicas
    obs.append(rest_o)
    exp.append(rest_e)
    stat = sum((o - e) ** 2 / e for o, e in zip(obs, exp) if e > 0)
    assert sps.chi2.sf(stat, len(obs) - 1) > 0.001


def test_stopping_line_truncated_identity(cosh2):
    # E[sum over the line truncated at depth d of e^{-V}] = P(max_{k<=d} S_k >= A)
    A, d, replicas = 4 * C2, 12, 100_000
    s = sample_stopping_lines(cosh2, A, replicas, np.random.default_rng(16), max_generations=d)
    m, se = s.sum_exp.mean(), s.sum_exp.std(ddof=1) / math.sqrt(replicas)
    j = 4  # A in units of c
    # P(max of a d-step simple walk >= j) = P(S_d >= j) + P(S_d > j) by reflection
    k = np.arange(d + 1)
    pos = 2 * k - d
    pk = sps.binom.pmf(k, d, 0.5)
    truth = pk[pos >= j].sum() + pk[pos > j].sum()
    assert abs(m - truth) <= 3 * se


@pytest.mark.xfail(reason="sum over the stopping line is heavy tailed; the sample mean at 1e5 replicas sits well below 1", strict=False)
def test_stopping_line_mean_A2(cosh2):
    s = sample_stopping_lines(cosh2, 2.0, 100_000, np.random.default_rng(17))
    v = s.sum_exp[~s.truncated]
    assert abs(v.mean() - 1.0) <= 3 * v.std(ddof=1) / math.sqrt(len(v))


def test_prune_matches_exact_conditioned_min(cosh2):
    n, level = 3, -C2
    exact = exact_min_cdf(cosh2, n)
    sel = exact.values <= level + 1e-9
    cond = exact.probs[sel] / exact.probs[sel].sum()
    rng = np.random.default_rng(18)
    batch = simulate_batch(cosh2, n, 200_000, rng, prune_level=level)
    mins = batch.I[:, -1]
    hit = np.isfinite(mins)
    assert np.all(mins[hit] <= level + 1e-9)
    assert abs(hit.mean() - exact.probs[sel].sum()) <= binom_ci(exact.probs[sel].sum(), len(hit))
    for v, p in zip(exact.values[sel], cond):
        freq = np.mean(np.isclose(mins[hit], v, atol=1e-9))
        assert abs(freq - p) <= binom_ci(p, int(hit.sum()))
    paths = leftmost_paths(batch, rng)
    assert np.array_equal(paths.values[hit, -1], mins[hit])


def test_a_n_examples(cosh2):
    assert a_n(0.0, 7, NONLATTICE) == pytest.approx(1.5 * math.log(7), abs=1e-12)
    assert a_n(0.0, 7, NONLATTICE) == pytest.approx(2.9188, abs=1e-4)
    lat = lattice_structure(cosh2)
    assert a_n(0.0, 20, lat) == pytest.approx(2 * C2, abs=1e-12)
    assert 2 * C2 == pytest.approx(2.6339, abs=1e-4)
    for z in (0.3, 1.0, 2 * C2):
        for L in (NONLATTICE, lat):
            assert a_n(z, 20, L) == a_n(0.0, 20, L) - z


def test_snap_to_span(cosh2):
    lat = lattice_structure(cosh2)
    assert snap_to_span(3 * C2, lat) == pytest.approx(4 * C2, abs=1e-12)
    assert snap_to_span(2 * C2, lat) == pytest.approx(2 * C2, abs=1e-12)
    assert snap_to_span(1.7, NONLATTICE) == 1.7


def test_path_diagnostics_examples(cosh2):
    m = path_diagnostics(np.array([0.0, 0.0]), 0.0, 0.0, 0.0, 0.5, NONLATTICE)
    assert m.endpoint_below  # a_1(0) = 0
    z, K = 2.0, 1.0
    dip = np.array([0.0, -z + K - 1.0, 0.0])
    assert not path_diagnostics(dip, z, K, 0.0, 0.5, NONLATTICE).stays_above


def test_path_diagnostics_probe(cosh2, rng):
    from brwx.minpath import LatticeMinSampler, sample_min_paths

    lat = lattice_structure(cosh2)
    vals, _ = sample_min_paths(LatticeMinSampler(cosh2, 20), 500, rng)
    flags = [path_diagnostics(v, 2 * C2, 0.0, 10.0, 0.5, lat) for v in vals]
    # the fraction is a probe only; its envelope constant is not known
    late_fail = float(np.mean([f.endpoint_below and not f.late_above for f in flags]))
    assert 0.0 <= late_fail <= 1.0
    assert all(f.member == (f.endpoint_below and f.stays_above and f.late_above) for f in flags)


def test_tree_csv_dump(cosh2, rng, tmp_path):
    run = simulate(cosh2, 3, rng)
    out = tmp_path / "tree.csv"
    run.to_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "#schema=1"
    assert lines[1] == "generation,index,parent,position"
    assert len(lines) == 2 + sum(len(p) for p in run.positions)
    with pytest.raises(ValueError):
        simulate(one_child(), 13, rng).to_csv(tmp_path / "big.csv")


def test_step_law_agrees_with_first_generation(cosh2, rng):
    st = step_law(cosh2)
    batch = simulate_batch(cosh2, 1, 200_000, rng)
    gen = batch.generations[1]
    w = np.exp(-gen.position)
    mass_down = w[gen.position < 0].sum() / batch.replicas
    assert mass_down == pytest.approx(st.as_dict()[-C2], abs=0.01)
