from __future__ import annotations

import numpy as np
import pytest

from brw_helpers import forward_paths
from brwx.exact import enumerate_tree, exact_min_cdf
from brwx.minpath import LatticeMinSampler, sample_min_paths
from brwx.model import lattice_structure
from brwx.stats import ks_two_sample

from conftest import C2


@pytest.mark.parametrize("name", ["cosh2", "cosh1.2", "bin2"])
def test_min_law_matches_enumeration(zoo, name):
    law = zoo[name]
    samp = LatticeMinSampler(law, 3)
    got = samp.min_law()
    want = exact_min_cdf(law, 3)
    assert np.allclose(got.values, want.values, atol=1e-12, rtol=0)
    assert np.allclose(got.probs, want.probs, atol=1e-12, rtol=0)
    assert got.missing == pytest.approx(want.missing, abs=1e-12)


def test_count_law_matches_enumeration(cosh2):
    n = 3
    samp = LatticeMinSampler(cosh2, n, kmax=16)
    law = samp.count_law()
    want = np.zeros_like(law)
    for t in enumerate_tree(cosh2, n):
        pos = t.positions[n]
        k = int(np.sum(np.isclose(pos, pos.min(), atol=1e-9)))
        want[k] += t.prob
    assert np.allclose(law, want, atol=1e-12)
    assert samp.overflow == 0.0


def test_prob_le(cosh2):
    samp = LatticeMinSampler(cosh2, 3)
    exact = exact_min_cdf(cosh2, 3)
    for level in (-3 * C2, -C2, 0.0, C2):
        assert samp.prob_le(level) == pytest.approx(exact.cdf(level), abs=1e-12)


def test_sampled_paths_lie_on_lattice(cosh2, rng):
    samp = LatticeMinSampler(cosh2, 12)
    lat = lattice_structure(cosh2)
    vals, ks = sample_min_paths(samp, 200, rng)
    assert np.all(vals[:, 0] == 0.0) and np.all(ks >= 1)
    g = np.arange(13)
    j = (vals - lat.offset * g) / lat.span
    assert np.allclose(j, np.round(j), atol=1e-9)
    assert np.all(np.abs(np.diff(vals, axis=1)) == pytest.approx(C2, abs=1e-9))


def test_conditioned_sampling_respects_level(cosh2, rng):
    samp = LatticeMinSampler(cosh2, 10)
    level = -2 * C2
    vals, _ = sample_min_paths(samp, 300, rng, level=level)
    assert np.all(vals[:, -1] <= level + 1e-9)
    with pytest.raises(ValueError):
        samp.sample(rng, level=-100.0)


def test_endpoint_law_matches_min_law(cosh2):
    rng = np.random.default_rng(23)
    samp = LatticeMinSampler(cosh2, 8)
    law = samp.min_law()
    vals, _ = sample_min_paths(samp, 20_000, rng)
    for v, p in zip(law.values, law.probs):
        if p < 1e-3:
            continue
        freq = np.mean(np.isclose(vals[:, -1], v, atol=1e-9))
        assert abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / 20_000)


@pytest.mark.parametrize("n,k", [(16, 8), (32, 16)])
def test_matches_forward_simulation(zoo, n, k):
    law = zoo["cosh1.2"]
    rng = np.random.default_rng(24 + n)
    rec, _ = sample_min_paths(LatticeMinSampler(law, n), 2000, rng)
    fwd = forward_paths(law, n, 2000, rng)
    assert ks_two_sample(rec[:, k], fwd[:, k]).pvalue > 0.001
    assert ks_two_sample(rec[:, -1], fwd[:, -1]).pvalue > 0.001


def test_rejects_non_lattice(zoo):
    with pytest.raises(ValueError):
        LatticeMinSampler(zoo["tri"], 3)
