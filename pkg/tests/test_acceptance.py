"""Acceptance suite.

Each test checks one criterion at its stated tolerance and records a single
PASS/FAIL line, repeated in the terminal summary. The desk-scale studies take
about a minute each on one core; deselect them with ``-m "not slow"``.
"""
import itertools
import json
import math
import random
import time
from fractions import Fraction

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import record_verdict
from synrep import design, harness
from synrep.cli import main
from synrep.core import WeightedSample, child_seed, write_sample
from synrep.inference import EstimandSpec, ReplicateStatistics, combine_synrep_1, combine_synrep_r, estimand_on_srs
from synrep.wfpbb import UrnState, bayesian_bootstrap, expand_pseudo_population, polya_probabilities, run_wfpbb_stage

SYNREP = ("synrep-r", "synrep-1")
R10 = ("M2R10", "M5R10", "M10R10", "M50R10")


def verdict(num, ok, detail):
    record_verdict(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


# ---------------------------------------------------------------------------
# 1. combining-rule arithmetic against an exact brute-force evaluation


def _exact_rules(q, v, R):
    """Combining quantities in exact rational arithmetic, written out longhand."""
    M = len(q)
    qf = [[Fraction(x) for x in row] for row in q]
    vf = [[Fraction(x) for x in row] for row in v]
    qbar_m = [sum(row) / R for row in qf]
    qbar = sum(qbar_m) / M
    b = sum((x - qbar) ** 2 for x in qbar_m) / (M - 1)
    vbar = sum(sum(row) for row in vf) / (M * R)
    if R == 1:
        raw = (1 + Fraction(1, M)) * b - 2 * vbar
        fallback = (1 + Fraction(3, M)) * vbar
    else:
        w_m = [sum((x - qm) ** 2 for x in row) / (R - 1) for row, qm in zip(qf, qbar_m)]
        wbar = sum(w_m) / M
        raw = (1 + Fraction(1, M)) * b - vbar - wbar / R
        fallback = (1 + Fraction(2, M)) * vbar + wbar / (M * R)
    final = fallback if raw <= 0 else raw
    return qbar, raw, final, raw <= 0


def _rel(a, exact):
    exact = float(exact)
    return abs(a - exact) / abs(exact) if exact != 0 else abs(a)


def test_criterion_1_combining_rule_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst, mismatched_flags = 0.0, 0
    for _ in range(1000):
        M, R = int(rng.integers(2, 11)), int(rng.integers(1, 11))
        q = rng.normal(rng.uniform(-50, 50), rng.uniform(0.01, 10), (M, R))
        v = rng.uniform(0.001, 5, (M, R))
        st_ = ReplicateStatistics(q, v)
        est = combine_synrep_1(st_) if R == 1 else combine_synrep_r(st_)
        qbar, raw, final, adjusted = _exact_rules(q.tolist(), v.tolist(), R)
        worst = max(worst, _rel(est.point, qbar), _rel(est.raw_variance, raw), _rel(est.variance, final))
        mismatched_flags += est.adjusted != adjusted
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and mismatched_flags == 0 and elapsed < 60
    verdict(1, ok, f"max relative error {worst:.2e} over 1000 inputs, {mismatched_flags} flag mismatches, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. Polya probabilities sum to one


def test_criterion_2_polya_normalization():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(2, 60))
        T = int(rng.integers(1, 5000))
        excess = rng.dirichlet(np.full(n, rng.uniform(0.2, 5))) * T  # weights - 1 sum to T
        k = int(rng.integers(0, T))
        tallies = rng.multinomial(k, np.full(n, 1 / n))
        p = polya_probabilities(UrnState(1.0 + excess, T, tallies, k))
        assert np.all(p >= 0)
        worst = max(worst, abs(math.fsum(p) - 1.0))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 60
    verdict(2, ok, f"max |sum p - 1| = {worst:.2e} over 10000 states, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. pseudo-population means centre on the Hajek estimate


def test_criterion_3_wfpbb_unbiasedness(population):
    sample = design.draw_pps(population, 200, 303)
    y, w = sample.column(), sample.weights
    hajek = math.fsum(w * y) / math.fsum(w)
    start = time.perf_counter()
    parts, ok = [], True
    for mode in ("truncated", "full"):
        means = np.array(
            [
                expand_pseudo_population(
                    bayesian_bootstrap(sample, child_seed(303, k, 0)), sample, mode, child_seed(303, k, 1)
                ).mean()
                for k in range(1000)
            ]
        )
        se = means.std(ddof=1) / math.sqrt(means.size)
        z = (means.mean() - hajek) / se
        ok &= abs(z) <= 3
        parts.append(f"{mode}: mean {means.mean():.3f} vs Hajek {hajek:.3f} ({z:+.2f} SE)")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300
    verdict(3, ok, "; ".join(parts) + f", {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. equal weights: WFPBB matches bootstrap + classical Polya urn


def _fpbb_oracle(y, N, reps, seed):
    """Bootstrap, then the unweighted Polya urn of balls, then an SRS; stdlib only."""
    rnd = random.Random(seed)
    n = len(y)
    out = []
    for _ in range(reps):
        urn = [y[rnd.randrange(n)] for _ in range(n)]
        for _ in range(N - n):
            urn.append(urn[rnd.randrange(len(urn))])
        srs = rnd.sample(urn, n)
        mean = math.fsum(srs) / n
        out.append((mean, math.fsum((x - mean) ** 2 for x in srs) / (n - 1)))
    return np.array(out)


def _compare(a, b):
    """z statistics for E[mean], E[s^2] and Var[mean] between two replicate sets."""
    zs = []
    for col in (0, 1):
        se = math.sqrt(a[:, col].var(ddof=1) / len(a) + b[:, col].var(ddof=1) / len(b))
        zs.append((a[:, col].mean() - b[:, col].mean()) / se)
    da, db = (a[:, 0] - a[:, 0].mean()) ** 2, (b[:, 0] - b[:, 0].mean()) ** 2
    zs.append((da.mean() - db.mean()) / math.sqrt(da.var(ddof=1) / len(da) + db.var(ddof=1) / len(db)))
    return zs


def test_criterion_4_uniform_weight_equivalence():
    n, N, reps = 50, 2000, 1000
    y = np.random.default_rng(404).gamma(2.0, 5.0, n)
    sample = WeightedSample(np.full(n, N / n), y, N)
    stage = run_wfpbb_stage(sample, reps, "full", 404)
    ours = np.array([(d.srs[:, 0].mean(), d.srs[:, 0].var(ddof=1)) for d in stage])
    oracle = _fpbb_oracle(y.tolist(), N, reps, 405)
    zs = _compare(ours, oracle)
    ok = all(abs(z) <= 3 for z in zs)
    verdict(4, ok, "z(E mean)={:+.2f}, z(E s2)={:+.2f}, z(Var mean)={:+.2f} over 1000 replicates".format(*zs))
    assert ok


# ---------------------------------------------------------------------------
# 5-7. desk-scale repeated-sampling studies


_STUDIES: dict = {}


def _study(name, synthesizer):
    key = (name, synthesizer)
    if key not in _STUDIES:
        cfg = harness.shipped_config(name).replace(synthesizer=synthesizer)
        start = time.perf_counter()
        report = harness.run_experiment(cfg)
        _STUDIES[key] = (report, time.perf_counter() - start)
    return _STUDIES[key]


def _settings(report, method):
    return [r for r in report.results if r.method == method]


def _pps_checks(report):
    """Sub-criteria (a)-(e); returns (all_ok, list of failure descriptions)."""
    bad = []
    for m in SYNREP:
        for r in _settings(report, m):
            if not abs(r.percent_bias) < 1.5:
                bad.append(f"(a) {m} {r.setting} bias {r.percent_bias:.2f}%")
            if r.M in (10, 50) and not 0.90 <= r.coverage <= 0.98:
                bad.append(f"(b) {m} {r.setting} coverage {r.coverage:.3f}")
            if not 0.7 <= r.variance_ratio <= 1.3:
                bad.append(f"(c) {m} {r.setting} ratio {r.variance_ratio:.2f}")
    for m in ("direct", "srssyn"):
        r = report.get(m)
        if not (r.percent_bias > 20 and r.coverage < 0.10):
            bad.append(f"(d) {m} bias {r.percent_bias:.1f}% coverage {r.coverage:.3f}")
    ht = report.get("ht")
    if not (abs(ht.percent_bias) < 1 and 0.92 <= ht.coverage <= 0.97):
        bad.append(f"(e) ht bias {ht.percent_bias:.2f}% coverage {ht.coverage:.3f}")
    return not bad, bad


@pytest.mark.slow
def test_criterion_5_desk_pps_study():
    report, elapsed = _study("desk_pps", "normal-bayes")
    ok, bad = _pps_checks(report)
    detail = "all sub-criteria met" if ok else f"{len(bad)} misses: " + "; ".join(bad)
    verdict(5, ok, f"normal-bayes, S=500, {elapsed:.0f}s on 1 worker; {detail}")
    assert ok, bad


@pytest.mark.slow
def test_criterion_5_plugin_record():
    """The same study with plug-in synthesis, recorded for comparison only."""
    report, elapsed = _study("desk_pps", "normal-plugin")
    ok, bad = _pps_checks(report)
    detail = "all sub-criteria met" if ok else f"{len(bad)} misses: " + "; ".join(bad)
    record_verdict(f"criterion 5 (normal-plugin, recorded only): {'PASS' if ok else 'FAIL'} - {detail}")


def _negative_checks(report):
    bad = []
    S = report.results[0].runs
    for m in ("pseudo-srs",) + SYNREP:
        rates = [report.get(m, s).negative_variance_rate for s in R10]
        for s, hi, lo in zip(R10[1:], rates, rates[1:]):
            if not (lo < hi or hi == lo == 0):
                bad.append(f"{m} not decreasing into {s} ({hi:.3f} -> {lo:.3f})")
        if not rates[0] > 0.20:
            bad.append(f"{m} M2 rate {rates[0]:.3f}")
        for s in ("M50R10", "M50R5"):
            count = report.get(m, s).negative_variance_rate * S
            if count > 3:  # zero events are indistinguishable from <= 3 in S runs
                bad.append(f"{m} {s} rate {count / S:.3f}")
    for s in R10 + ("M50R5",):
        p1 = report.get("synrep-1", s).negative_variance_rate
        pr = report.get("synrep-r", s).negative_variance_rate
        se = math.sqrt((p1 * (1 - p1) + pr * (1 - pr)) / S)
        if p1 < pr - 3 * se:
            bad.append(f"{s} synrep-1 {p1:.3f} < synrep-r {pr:.3f}")
    return not bad, bad


@pytest.mark.slow
def test_criterion_6_negative_variance_ordering():
    report, _ = _study("desk_pps", "normal-bayes")
    ok, bad = _negative_checks(report)
    table = ", ".join(f"{s}/{m}={pct:.1f}%" for s, m, pct in harness.negative_variance_table(report) if s != "M50R5")
    verdict(6, ok, (table if ok else "; ".join(bad) + " | " + table))
    assert ok, bad


def _srs_checks(report):
    bad = []
    for m in SYNREP:
        for r in _settings(report, m):
            if not 0.89 <= r.coverage <= 0.97:
                bad.append(f"{m} {r.setting} coverage {r.coverage:.3f}")
            if abs(r.percent_bias) > 3 * r.bias_se:
                bad.append(f"{m} {r.setting} bias {r.percent_bias:.2f}% (SE {r.bias_se:.2f})")
    return not bad, bad


@pytest.mark.slow
def test_criterion_7_srs_sanity():
    report, elapsed = _study("desk_srs", "normal-bayes")
    ok, bad = _srs_checks(report)
    verdict(7, ok, f"normal-bayes, {elapsed:.0f}s; " + ("all settings within bands" if ok else "; ".join(bad)))
    assert ok, bad


@pytest.mark.slow
def test_criterion_7_plugin_record():
    report, _ = _study("desk_srs", "normal-plugin")
    ok, bad = _srs_checks(report)
    detail = "all settings within bands" if ok else "; ".join(bad)
    record_verdict(f"criterion 7 (normal-plugin, recorded only): {'PASS' if ok else 'FAIL'} - {detail}")


# ---------------------------------------------------------------------------
# 8. determinism of generate and simulate


def test_criterion_8_determinism(tmp_path, population):
    runner = CliRunner()
    write_sample(design.draw_pps(population, 120, 808), tmp_path / "s.csv")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 60, "settings": [[2, 2], [4, 3]], "S": 16, "population": {"N": 3000}}))
    gen, sim = [], []
    for k, threads in enumerate((1, 1, 8)):
        out = tmp_path / f"rel{k}.csv"
        res = runner.invoke(
            main,
            ["generate", str(tmp_path / "s.csv"), "--variant", "synrep-r", "-M", "6", "-R", "3",
             "--seed", "8", "--threads", str(threads), "-o", str(out)],
        )
        assert res.exit_code == 0, res.output
        gen.append(out.read_bytes())
        odir = tmp_path / f"sim{k}"
        res = runner.invoke(main, ["simulate", str(cfg), "-o", str(odir), "--seed", "8", "--threads", str(threads)])
        assert res.exit_code == 0, res.output
        sim.append(tuple((odir / f).read_bytes() for f in ("report.json", "report.csv", "report.md")))
    ok = gen[0] == gen[1] == gen[2] and sim[0] == sim[1] == sim[2]
    verdict(8, ok, "generate and simulate byte-identical across two runs and threads 1 vs 8" if ok else "outputs differ")
    assert ok


# ---------------------------------------------------------------------------
# 9. exhaustive SRS enumeration


def test_criterion_9_exhaustive_srs_variance():
    y = np.array([12.5, -3.0, 7.25, 40.0, 0.5, 9.0])
    N, n = 6, 2
    samples = list(itertools.combinations(range(N), n))
    means = np.array([y[list(c)].mean() for c in samples])
    design_var = math.fsum((means - y.mean()) ** 2) / len(samples)
    S2 = math.fsum((y - y.mean()) ** 2) / (N - 1)
    formula = (1 - n / N) * S2 / n
    est = [estimand_on_srs(y[list(c)], EstimandSpec(), N) for c in samples]
    mean_est = math.fsum(e.variance for e in est) / len(est)
    err = max(abs(formula - design_var), abs(mean_est - design_var)) / design_var
    ok = len(samples) == 15 and err <= 1e-12
    verdict(9, ok, f"15 samples, design variance {design_var:.6f}, relative error {err:.1e}")
    assert ok
