from __future__ import annotations

import math

import numpy as np
import pytest

from brwx.model import cosh_family
from brwx.rwalk import (
    ballot_bound_probe,
    killed_distribution,
    make_step_law,
    negate,
    renewal_R,
    simulate_walk,
    step_law,
    survival_prob,
)

from conftest import C2, one_child


@pytest.fixture(scope="module")
def srw():
    return step_law(cosh_family(2.0))


def test_step_law_examples(zoo):
    assert step_law(one_child()).as_dict() == {0.0: 1.0}
    bin2 = zoo["bin2"]
    st = step_law(bin2)
    probs = dict(bin2.displacement)
    lo, hi = min(probs), max(probs)
    assert hi == pytest.approx(math.log(4.0), abs=1e-12)
    d = st.as_dict()
    assert d[min(d)] == pytest.approx(2 * probs[lo] * math.exp(-lo), abs=1e-12)
    assert d[max(d)] == pytest.approx(2 * probs[hi] * math.exp(-hi), abs=1e-12)
    assert sum(d.values()) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("name", ["cosh2", "cosh1.2", "bin2", "pm1", "tri", "mix"])
def test_step_law_centered_with_sigma2(zoo, name):
    from brwx.model import check_boundary

    law = zoo[name]
    st = step_law(law)
    assert abs(st.mean) <= 1e-10
    assert st.variance == pytest.approx(check_boundary(law).sigma2, abs=1e-10)
    assert abs(st.probs.sum() - 1.0) <= 1e-12


def test_simulate_walk_examples(srw, rng):
    const = make_step_law([0.0], [1.0])
    assert np.all(simulate_walk(const, 50, 0.0, rng) == 0.0)
    paths = simulate_walk(srw, 100, 0.0, rng, size=10_000)
    x = paths[:, -1] / 10.0
    assert abs(x.mean()) <= 4 * x.std(ddof=1) / math.sqrt(len(x))
    end = simulate_walk(srw, 1000, 0.0, rng, size=10_000)[:, -1]
    v = end**2 / 1000.0  # S_n^2 / n has mean sigma^2
    se = v.std(ddof=1) / math.sqrt(len(v))
    assert abs(v.mean() - C2**2) <= 3 * se


def test_simulate_walk_lattice_exact(srw, rng):
    p = simulate_walk(srw, 40, 0.0, rng, size=50)
    j = p / C2
    assert np.allclose(j, np.round(j), atol=1e-9, rtol=0)


def test_renewal_zero_is_one(srw):
    assert renewal_R(srw, 0.0) == 1.0
    with pytest.raises(ValueError):
        renewal_R(srw, -1.0)


def test_renewal_srw_examples(srw):
    for j in range(1, 6):
        R, bound = renewal_R(srw, j * C2, k_max=1_000_000, return_bound=True)
        assert abs(R - (1 + j)) <= 0.02 * (1 + j)
        assert 0.0 <= bound < 0.01


def test_renewal_reflected_symmetric(srw):
    neg = negate(srw)
    for j in (1, 3):
        assert renewal_R(neg, j * C2, k_max=100_000) == pytest.approx(renewal_R(srw, j * C2, k_max=100_000), abs=1e-12)


def test_renewal_dp_vs_mc(srw, rng):
    dp = renewal_R(srw, 2 * C2, k_max=2000)
    mc, se = renewal_R(srw, 2 * C2, k_max=2000, mode="mc", rng=rng, replicas=2000, return_bound=True)
    assert abs(dp - mc) <= 4 * se + 1e-9


def test_renewal_ratio_stabilizes(srw):
    R40 = renewal_R(srw, 40.0)
    c0 = R40 / 40.0
    gaps = [abs(renewal_R(srw, x) / x - c0) for x in (5.0, 10.0, 20.0)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_survival_examples(srw):
    assert survival_prob(srw, 0) == 1.0
    assert survival_prob(srw, 2) == pytest.approx(0.5, abs=1e-15)
    n = 10_000
    assert math.sqrt(n) * survival_prob(srw, n) == pytest.approx(math.sqrt(2 / math.pi), rel=0.02)


def test_survival_dp_vs_mc(srw, rng):
    dp = survival_prob(srw, 50, C2)
    mc, se = survival_prob(srw, 50, C2, mode="mc", rng=rng, replicas=50_000)
    assert abs(dp - mc) <= 4 * se


def test_kozlov_ratio_constant(srw):
    n = 10_000
    vals = [math.sqrt(n) * survival_prob(srw, n, a) / renewal_R(srw, a) for a in (0.0, C2, 2 * C2)]
    assert max(vals) / min(vals) - 1.0 < 0.05


def test_killed_distribution_is_subprobability(srw):
    pos, m = killed_distribution(srw, 6, 0.0, np.zeros(7))
    assert np.all(pos >= -1e-12)
    assert m.sum() <= 1.0
    # 20 of the 64 six-step paths never go below 0
    assert m.sum() == pytest.approx(20 / 64, abs=1e-15)


def test_ballot_probe_examples(srw):
    probe = ballot_bound_probe(srw, x=0.0, a=0.0, b=1.0, ns=(100, 400, 900))
    assert probe.applicable and probe.within_envelope
    deg = ballot_bound_probe(make_step_law([0.0], [1.0]), x=0.0, a=0.0, b=1.0)
    assert not deg.applicable and deg.within_envelope is None
    grid = ballot_bound_probe(srw, x=0.0, a=0.0, b=1.0, ns=(100, 1000, 10_000))
    assert max(grid.scaled) / min(grid.scaled) < 2.0


def test_ballot_probe_late_window(srw):
    probe = ballot_bound_probe(srw, x=C2, a=0.0, b=2 * C2, lam=0.5, y=C2, ns=(100, 400))
    assert probe.applicable
    assert all(0.0 < v < 1.0 for v in probe.lhs)


def test_step_law_rejects_unnormalized():
    from brwx.model import NotBoundaryError

    from conftest import two_at_zero

    with pytest.raises(NotBoundaryError):
        step_law(two_at_zero())
