import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synrep.core import WeightedSample
from synrep.wfpbb import (
    BootstrapSample,
    DegenerateUrnError,
    Mode,
    UrnState,
    bayesian_bootstrap,
    draw_pseudo_srs,
    dump_pseudo_population,
    expand_pseudo_population,
    expansion_target,
    polya_probabilities,
    renormalize_weights,
    run_wfpbb_stage,
)

from conftest import equal_weight_sample


def test_identity_bootstrap_renormalisation():
    w = np.array([1.0, 3.0, 6.0])
    assert np.allclose(renormalize_weights(w, np.ones(3, int), 20), 20 * w / w.sum())


def test_equal_weights_renormalise_to_counts():
    counts = np.array([0, 2, 1, 1])
    assert np.allclose(renormalize_weights(np.full(4, 5.0), counts, 20), 20 * counts / 4)


@pytest.mark.parametrize("scheme", ["uniform", "dirichlet"])
def test_bootstrap_counts_have_unit_mean(pps_sample, scheme):
    rng = np.random.default_rng(0)
    reps = 10_000
    counts = np.array([bayesian_bootstrap(pps_sample, rng, scheme).counts for _ in range(reps)])
    z = (counts.mean(axis=0) - 1) / (counts.std(axis=0, ddof=1) / math.sqrt(reps))
    # 200 units: expect about 0.5 beyond 3 SE by chance, none beyond 4.5
    assert np.mean(np.abs(z) > 3) <= 0.02 and np.abs(z).max() < 4.5


def test_bootstrap_sample_invariants(pps_sample):
    b = bayesian_bootstrap(pps_sample, 4)
    assert b.counts.sum() == pps_sample.n
    assert math.isclose(b.renormalized_weights.sum(), pps_sample.population_size, rel_tol=1e-9)
    assert np.array_equal(b.renormalized_weights == 0, b.counts == 0)
    with pytest.raises(ValueError):
        BootstrapSample(np.array([2, 1]), np.array([5.0, 5.0]), 10)


def test_polya_first_draw_equal_weights():
    n, N = 5, 50
    state = UrnState(np.full(n, N / n), N - n)
    assert np.allclose(polya_probabilities(state), 1 / n)


def test_polya_hand_example():
    state = UrnState(np.array([3.0, 1.0]), 2, tallies=[1, 0], draws_made=1)
    p = polya_probabilities(state)
    assert np.allclose(p, [1.0, 0.0]) and p.sum() == 1.0


def test_polya_clamps_small_weights():
    state = UrnState(np.array([0.5, 5.0, 4.5]), 7)
    p = polya_probabilities(state)
    assert p[0] == 0 and math.isclose(p.sum(), 1.0)
    assert math.isclose(p[1] / p[2], 4.0 / 3.5)
    with pytest.raises(DegenerateUrnError):
        polya_probabilities(UrnState(np.array([0.5, 1.0]), 3))


def test_urn_state_validation():
    with pytest.raises(ValueError):
        UrnState(np.ones(3), 4, tallies=[1, 0, 0], draws_made=2)
    with pytest.raises(ValueError):
        UrnState(np.ones(3), 0)
    s = UrnState(np.full(2, 2.0), 1)
    s.record(0)
    with pytest.raises(ValueError):
        s.record(1)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_polya_sums_to_one_without_clamping(data):
    n = data.draw(st.integers(2, 30))
    T = data.draw(st.integers(1, 500))
    excess = np.array(data.draw(st.lists(st.floats(0, 100), min_size=n, max_size=n)))
    excess = excess / excess.sum() * T if excess.sum() > 0 else np.full(n, T / n)
    k = data.draw(st.integers(0, T - 1))
    tallies = np.random.default_rng(k).multinomial(k, np.full(n, 1 / n))
    p = polya_probabilities(UrnState(1.0 + excess, T, tallies, k))
    assert abs(p.sum() - 1) <= 1e-12 and np.all(p >= 0)


def test_expansion_target():
    assert expansion_target(10, 1000, "full") == 990
    assert expansion_target(10, 1000, "truncated") == 500
    with pytest.raises(ValueError):
        expansion_target(10, 10, Mode.FULL)


@pytest.mark.parametrize("mode", ["full", "truncated"])
def test_pseudo_population_structure(pps_sample, mode):
    boot = bayesian_bootstrap(pps_sample, 1)
    pop = expand_pseudo_population(boot, pps_sample, mode, 2)
    n, N = pps_sample.n, pps_sample.population_size
    assert pop.size == (N if mode == "full" else 51 * n)
    assert np.all(pop.multiplicity >= boot.counts)
    assert np.all(pop.multiplicity[boot.counts == 0] == 0)
    parent = {tuple(r) for r in pps_sample.values}
    assert {tuple(r) for r in np.unique(pop.rows, axis=0)} <= parent
    assert math.isclose(pop.mean(), pop.rows.mean(), rel_tol=1e-12)


def test_two_unit_symmetry():
    N = 40
    s = WeightedSample([N / 2, N / 2], [0.0, 1.0], N)
    rng = np.random.default_rng(3)
    shares = []
    for _ in range(1000):
        boot = bayesian_bootstrap(s, rng)
        pop = expand_pseudo_population(boot, s, "full", rng)
        shares.append((pop.multiplicity[0] - boot.counts[0]) / (N - 2))
    shares = np.array(shares)
    assert abs(shares.mean() - 0.5) <= 3 * shares.std(ddof=1) / math.sqrt(shares.size)


def test_sequential_and_collapsed_urns_agree():
    # same distribution: compare per-unit mean and variance of urn tallies
    w = np.array([2.0, 3.0, 5.0, 10.0])
    s = WeightedSample(w, np.arange(4.0), 20)
    boot = BootstrapSample(np.ones(4, int), w, 20)
    out = {}
    for sampler in ("sequential", "collapsed"):
        rng = np.random.default_rng(11)
        out[sampler] = np.array(
            [expand_pseudo_population(boot, s, "full", rng, sampler=sampler).multiplicity for _ in range(3000)]
        )
    a, b = out["sequential"], out["collapsed"]
    se = np.sqrt(a.var(axis=0, ddof=1) / 3000 + b.var(axis=0, ddof=1) / 3000)
    assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) <= 3 * se)
    ratio = a.var(axis=0, ddof=1) / b.var(axis=0, ddof=1)
    assert np.all((ratio > 0.85) & (ratio < 1.18))


def test_collapsed_urn_expected_shares():
    w = np.array([2.0, 3.0, 5.0, 10.0])
    s = WeightedSample(w, np.arange(4.0), 20)
    boot = BootstrapSample(np.ones(4, int), w, 20)
    rng = np.random.default_rng(1)
    m = np.array([expand_pseudo_population(boot, s, "full", rng).multiplicity for _ in range(4000)])
    se = m.std(axis=0, ddof=1) / math.sqrt(4000)
    assert np.all(np.abs(m.mean(axis=0) - w) <= 3 * se)


def test_pseudo_srs(pps_sample):
    pop = expand_pseudo_population(bayesian_bootstrap(pps_sample, 1), pps_sample, "truncated", 2)
    full = draw_pseudo_srs(pop, pop.size, 3)
    assert Counter(full[:, 0].tolist()) == Counter(pop.rows[:, 0].tolist())
    assert np.array_equal(draw_pseudo_srs(pop, 50, 9), draw_pseudo_srs(pop, 50, 9))
    with pytest.raises(ValueError):
        draw_pseudo_srs(pop, pop.size + 1, 3)
    rng = np.random.default_rng(4)
    means = np.array([draw_pseudo_srs(pop, 50, rng).mean() for _ in range(1000)])
    assert abs(means.mean() - pop.mean()) <= 3 * means.std(ddof=1) / math.sqrt(1000)


def test_stage_determinism_and_independence(pps_sample):
    a = run_wfpbb_stage(pps_sample, 3, "truncated", 42)
    b = run_wfpbb_stage(pps_sample, 3, "truncated", 42, workers=3)
    c = run_wfpbb_stage(pps_sample, 3, "truncated", 43)
    assert all(np.array_equal(x.srs, y.srs) for x, y in zip(a, b))
    assert not np.array_equal(a[0].srs, a[1].srs)
    assert not np.array_equal(a[0].srs, c[0].srs)
    assert [d.m for d in a] == [1, 2, 3] and a[0].population is None
    assert a[0].srs.shape == (pps_sample.n, 1)
    with pytest.raises(ValueError):
        run_wfpbb_stage(pps_sample, 2, "truncated", None)


def test_stage_pseudo_pop_mean_tracks_hajek(pps_sample):
    y, w = pps_sample.column(), pps_sample.weights
    hajek = float(w @ y / w.sum())
    stage = run_wfpbb_stage(pps_sample, 300, "full", 5)
    means = np.array([d.summary.mean[0] for d in stage])
    assert abs(means.mean() - hajek) <= 3 * means.std(ddof=1) / math.sqrt(means.size)


def test_dump_is_marked_confidential(tmp_path, pps_sample):
    stage = run_wfpbb_stage(pps_sample, 2, "truncated", 1, keep_populations=True)
    dump_pseudo_population(stage[0].population, tmp_path / "pop.csv")
    head = (tmp_path / "pop.csv").read_text().splitlines()[0]
    assert '"confidential": true' in head


def test_equal_weight_urn_matches_classic_polya():
    # equal weights, unit counts: WFPBB concentrations equal one ball per unit
    s = equal_weight_sample(n=5, N=500)
    boot = BootstrapSample(np.ones(5, int), np.full(5, 100.0), 500)
    rng = np.random.default_rng(2)
    m = np.array([expand_pseudo_population(boot, s, "full", rng).multiplicity for _ in range(3000)]) / 500
    # Polya urn from one ball each: shares ~ Dirichlet(1,...,1), var = (n-1)/(n^2 (n+1))
    assert np.allclose(m.var(axis=0, ddof=1), 4 / 150, rtol=0.15)
