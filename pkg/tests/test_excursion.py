from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate

from brwx.excursion import (
    SQRT_HALF_PI,
    bessel_restriction,
    bridges,
    const_one,
    excursion_marginal,
    excursion_values,
    excursions,
    meander_excursion_identity,
    meanders,
    sample_excursion,
    sample_meander,
    value_at,
)
from brwx.stats import EmpiricalSample, ks_one_sample, ks_two_sample, mean_se

G = 65  # grid used where no size is prescribed


def test_excursion_endpoints_pinned(rng):
    e = excursions(G, 2000, rng)
    assert np.all(e[:, 0] == 0.0) and np.all(e[:, -1] == 0.0)
    assert np.all(e[:, 1:-1] > 0.0)
    one = sample_excursion(G, rng)
    assert one.values[0] == 0.0 and one.values[-1] == 0.0 and one.weight == 1.0


def test_excursion_midpoint_mean(rng):
    x = excursion_values([0.5], 100_000, rng, G=G)[:, 0]
    assert x.mean() == pytest.approx(2 / math.sqrt(2 * math.pi), rel=0.01)


def test_excursion_time_reversal(rng):
    v = excursion_values([0.25, 0.75], 100_000, rng, G=G)
    assert ks_two_sample(v[:, 0], v[:, 1]).pvalue > 0.01


def test_excursion_midpoint_ks(rng):
    n = 100_000
    x = excursion_values([0.5], n, rng, G=G)[:, 0]
    res = ks_one_sample(x, excursion_marginal(0.5).cdf)
    assert res.statistic < 1.95 / math.sqrt(n) * 1.5


def test_bridge_marginals(rng):
    b = bridges(G, 50_000, rng)
    assert np.all(b[:, 0] == 0.0) and np.all(b[:, -1] == 0.0)
    for i in (8, 16, 32, 48):
        s = i / (G - 1)
        m, se = mean_se(b[:, i])
        assert abs(m) <= 3 * se
        sq = b[:, i] ** 2
        m2, se2 = mean_se(sq)
        assert abs(m2 - s * (1 - s)) <= 3 * se2


def test_bridges_non_dyadic_grid(rng):
    b = bridges(10, 40_000, rng)
    s = 3 / 9
    m2, se2 = mean_se(b[:, 3] ** 2)
    assert abs(m2 - s * (1 - s)) <= 3 * se2


def test_meander_weights(rng):
    r, w = meanders(G, 100_000, rng)
    m, se = mean_se(w)
    assert abs(m - 1.0) <= 3 * se
    assert np.all(r[:, 1:] > 0.0) and np.all(r[:, 0] == 0.0)
    em, _ = mean_se(r[:, -1], w)
    assert em == pytest.approx(SQRT_HALF_PI, rel=0.02)
    one = sample_meander(G, rng)
    assert one.values[0] == 0.0 and one.weight > 0


def test_marginal_examples():
    assert excursion_marginal(0.5).mean == pytest.approx(0.79788, abs=1e-5)
    for s in (0.1, 0.5, 0.9):
        m = excursion_marginal(s)
        total, _ = integrate.quad(m.pdf, 0, np.inf, epsabs=1e-12, epsrel=1e-12)
        assert abs(total - 1.0) <= 1e-8
        mean, _ = integrate.quad(lambda x: x * m.pdf(x), 0, np.inf, epsabs=1e-12)
        assert mean == pytest.approx(m.mean, abs=1e-8)
        assert float(m.cdf(10.0)) == pytest.approx(1.0, abs=1e-12)
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            excursion_marginal(bad)


@pytest.mark.parametrize("delta", [0.25, 0.5])
def test_identity_const_one(delta, rng):
    chk = meander_excursion_identity(delta, const_one, 100_000, rng, G=G)
    assert chk.rhs == pytest.approx(SQRT_HALF_PI, abs=1e-12)
    assert chk.lhs == pytest.approx(SQRT_HALF_PI, rel=0.02)


def _battery(delta):
    med = float(excursion_marginal(delta / 2).mean)  # a fixed threshold near the median
    return {
        "below_mid": value_at(delta / 2, lambda x: (x <= med).astype(float)),
        "exp_end": value_at(delta, lambda x: np.exp(-x)),
        "sup_small": lambda t, v: (v.max(axis=1) <= 0.8).astype(float),
        "area": lambda t, v: np.exp(-v.mean(axis=1)),
        "quarter_value": value_at(delta / 4, lambda x: np.minimum(x, 1.0)),
    }


@pytest.mark.parametrize("delta", [0.25, 0.5])
def test_identity_battery(delta):
    rng = np.random.default_rng(21)
    for name, F in _battery(delta).items():
        chk = meander_excursion_identity(delta, F, 40_000, rng, G=G)
        assert chk.agrees(3.0), (name, chk)


def test_identity_rejects_bad_delta(rng):
    with pytest.raises(ValueError):
        meander_excursion_identity(0.3, const_one, 10, rng, G=G)
    with pytest.raises(ValueError):
        meander_excursion_identity(1.0, const_one, 10, rng, G=G)


def test_bessel_restriction_matches_excursion():
    rng = np.random.default_rng(22)
    delta, n = 0.5, 100_000
    t, r, w = bessel_restriction(delta, n, rng, G=G)
    e = excursion_values([delta / 2, delta], n, rng, G=G)
    i_half = int(round(delta / 2 * (G - 1)))
    a = EmpiricalSample(r[:, i_half], w)
    assert ks_two_sample(a, e[:, 0]).pvalue > 0.01
    assert ks_two_sample(EmpiricalSample(r[:, -1], w), e[:, 1]).pvalue > 0.01


def test_excursion_values_off_grid(rng):
    with pytest.raises(ValueError):
        excursion_values([0.3], 10, rng, G=G)
