from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from brwx.stats import (
    EmpiricalSample,
    chi_square_uniform,
    ks_one_sample,
    ks_two_sample,
    mean_ci,
    mean_jackknife,
    mean_se,
    weighted_mean,
)

floats = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_ks_two_sample_examples():
    assert ks_two_sample([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]).statistic == 0.0
    assert ks_two_sample([1.0, 2.0], [5.0, 6.0, 7.0]).statistic == 1.0
    assert ks_two_sample([1, 2, 3], [1, 2, 3, 4]).statistic == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        ks_two_sample([], [1.0])


def test_ks_two_sample_matches_scipy_statistic(rng):
    a, b = rng.normal(size=300), rng.normal(0.2, 1, size=500)
    assert ks_two_sample(a, b).statistic == pytest.approx(sps.ks_2samp(a, b).statistic, abs=1e-12)


def test_ks_one_sample_examples():
    with pytest.raises(ValueError):
        ks_one_sample([], sps.norm.cdf)
    assert ks_one_sample(np.zeros(50), sps.norm.cdf).statistic >= 0.5
    passes = 0
    for seed in range(100):
        x = np.random.default_rng(seed).normal(size=2000)
        passes += ks_one_sample(x, sps.norm.cdf).pvalue > 0.01
    assert passes >= 95


def test_ks_one_sample_matches_scipy(rng):
    x = rng.exponential(size=400)
    ours = ks_one_sample(x, sps.expon.cdf)
    ref = sps.kstest(x, sps.expon.cdf)
    assert ours.statistic == pytest.approx(ref.statistic, abs=1e-12)


def test_mean_ci_examples():
    m, h = mean_ci(np.full(10, 3.5))
    assert m == 3.5 and h == 0.0
    inside = covered = 0
    for seed in range(100):
        x = np.random.default_rng(seed).integers(0, 2, size=10_000).astype(float)
        m, h = mean_ci(x, 0.95)
        inside += abs(m - 0.5) <= 0.02
        covered += abs(m - 0.5) <= h
    assert inside >= 95 and covered >= 88
    x = np.random.default_rng(1).normal(size=200)
    assert mean_ci(x, 0.95, weights=np.full(200, 2.5)) == pytest.approx(mean_ci(x, 0.95), abs=1e-14)
    with pytest.raises(ValueError):
        mean_ci(x, 1.5)


def test_mean_se_and_jackknife_agree(rng):
    x = rng.normal(size=1000)
    m1, s1 = mean_se(x)
    m2, s2 = mean_jackknife(x)
    assert m1 == pytest.approx(m2, abs=1e-14)
    assert s1 == pytest.approx(s2, rel=1e-10)
    assert s1 == pytest.approx(x.std(ddof=1) / math.sqrt(len(x)), rel=1e-10)


def test_chi_square_examples():
    assert chi_square_uniform([25, 25, 25, 25]).pvalue == 1.0
    with pytest.raises(ValueError):
        chi_square_uniform([10])
    res = chi_square_uniform([60, 40])
    assert res.statistic == pytest.approx(4.0, abs=1e-12) and res.dof == 1
    assert res.pvalue == pytest.approx(sps.chisquare([60, 40]).pvalue, abs=1e-12)


def test_weights_validation():
    with pytest.raises(ValueError):
        EmpiricalSample([1.0, 2.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        EmpiricalSample([1.0, 2.0], [1.0])
    s = EmpiricalSample([3.0, 1.0, 2.0], [1.0, 1.0, 2.0])
    assert s.values.tolist() == [1.0, 2.0, 3.0] and s.weights.tolist() == [1.0, 2.0, 1.0]
    assert s.n_eff == pytest.approx(16 / 6)
    assert s.ecdf([0.5, 1.0, 2.5, 3.0]).tolist() == [0.0, 0.25, 0.75, 1.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(floats, min_size=2, max_size=60), st.randoms(use_true_random=False))
def test_permutation_invariance(xs, rnd):
    ys = list(xs)
    rnd.shuffle(ys)
    assert weighted_mean(xs) == weighted_mean(ys)
    assert mean_se(xs) == mean_se(ys)
    assert mean_jackknife(xs) == mean_jackknife(ys)
    assert ks_two_sample(xs, [0.0, 1.0]) == ks_two_sample(ys, [0.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(floats, min_size=1, max_size=40), st.lists(floats, min_size=1, max_size=40))
def test_unit_weights_match_unweighted(a, b):
    plain = ks_two_sample(a, b)
    weighted = ks_two_sample(EmpiricalSample(a, np.ones(len(a))), EmpiricalSample(b, np.ones(len(b))))
    assert plain.statistic == weighted.statistic
    assert plain.pvalue == pytest.approx(weighted.pvalue, rel=1e-12, abs=1e-15)
