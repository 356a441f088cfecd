"""Repeated-sampling evaluation of the synthesis pipelines.

One finite population is generated per experiment and held fixed. Each run
draws a parent sample, applies every configured method, and records point
estimates, variances and interval coverage against the realised population
mean. Run s draws from substreams keyed ``(seed, s, stage)``, and results are
aggregated in run order, so reports do not depend on the worker count.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import design
from .core import SynRepError, Variant, child_seed, substream
from .inference import (
    EstimandSpec,
    ReplicateStatistics,
    combine_pseudo_pop,
    combine_pseudo_srs,
    combine_synrep_1,
    combine_synrep_r,
    estimand_on_srs,
    interval,
)
from .synthesizer import SynthesizerSpec, synthesize_release
from .wfpbb import BootstrapScheme, Mode, run_wfpbb_stage

__all__ = [
    "METHODS",
    "CSV_COLUMNS",
    "ConfigError",
    "ExperimentAborted",
    "PopulationConfig",
    "ExperimentConfig",
    "MethodResult",
    "SimulationReport",
    "load_config",
    "shipped_config",
    "build_population",
    "run_experiment",
    "negative_variance_table",
    "emit_report",
    "emit_raw",
]

METHODS = ("pseudo-pop", "pseudo-srs", "synrep-r", "synrep-1", "direct", "ht", "srssyn")
DESIGN_ONLY = ("direct", "ht", "srssyn")
CSV_COLUMNS = (
    "method",
    "setting",
    "M",
    "R",
    "runs",
    "percent_bias",
    "bias_se",
    "coverage",
    "coverage_se",
    "variance_ratio",
    "negative_variance_rate",
    "mean_runtime",
)
CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(SynRepError, ValueError):
    code = "E_CONFIG"


class ExperimentAborted(SynRepError, RuntimeError):
    code = "E_ABORTED"


@dataclass(frozen=True)
class PopulationConfig:
    N: int = 100_000
    intercept: float = 20.0
    slope: float = 0.2
    noise_sd: float = 100.0
    size_mean: float = 102.0
    size_cv: float = 0.88
    size_min: float = 1.0
    size_max: float = 3223.0
    size_file: "str | None" = None
    cache: "str | None" = None


@dataclass(frozen=True)
class ExperimentConfig:
    design: str = "pps"
    n: int = 500
    settings: tuple = ((2, 10), (5, 10), (10, 10), (50, 10), (50, 5))
    methods: tuple = METHODS
    S: int = 500
    level: float = 0.95
    mode: str = "truncated"
    seed: int = 20240601
    workers: int = 1
    synthesizer: str = "normal-bayes"
    bootstrap: str = "uniform"
    population: PopulationConfig = PopulationConfig()

    def __post_init__(self):
        object.__setattr__(self, "settings", tuple((int(M), int(R)) for M, R in self.settings))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.design not in ("pps", "srs"):
            raise ConfigError(f"design: expected 'pps' or 'srs', got {self.design!r}")
        if self.S < 2:
            raise ConfigError("S: at least 2 replications are required")
        if self.n < 2:
            raise ConfigError("n: must be at least 2")
        if not 0 < self.level < 1:
            raise ConfigError("level: must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers: must be positive")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"methods: unknown method {bad[0]!r}")
        if not self.settings and any(m not in DESIGN_ONLY for m in self.methods):
            raise ConfigError("settings: at least one (M, R) pair is required")
        for M, R in self.settings:
            if M < 2 or R < 2:
                raise ConfigError(f"settings: ({M}, {R}) needs M >= 2 and R >= 2")
        try:
            Mode(self.mode)
            BootstrapScheme(self.bootstrap)
            SynthesizerSpec(self.synthesizer)
        except (ValueError, SynRepError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        data = dict(data)
        pop = data.pop("population", {}) or {}
        pop_known = {f.name for f in fields(PopulationConfig)}
        for key in pop:
            if key not in pop_known:
                raise ConfigError(f"unknown config key 'population.{key}'")
        try:
            return cls(population=PopulationConfig(**pop), **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["settings"] = [list(s) for s in self.settings]
        d["methods"] = list(self.methods)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        pop = dict(d.pop("population"))
        pop.update(changes.pop("population", {}))
        d.update(changes)
        return ExperimentConfig.from_dict({**d, "population": pop})


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(data)


def shipped_config(name: str) -> ExperimentConfig:
    """One of the bundled configs: desk_pps, desk_srs, full_pps, full_srs."""
    return load_config(CONFIG_DIR / f"{name}.json")


def build_population(config: ExperimentConfig) -> design.FinitePopulation:
    pc = config.population
    if pc.cache and Path(pc.cache).exists():
        return design.read_population(pc.cache)
    sizes = tuple(design.read_size_file(pc.size_file)) if pc.size_file else None
    spec = design.SyntheticPopulationSpec(
        N=pc.N,
        intercept=pc.intercept,
        slope=pc.slope,
        noise_sd=pc.noise_sd,
        size_distribution=design.SizeDistribution(pc.size_mean, pc.size_cv, pc.size_min, pc.size_max),
        sizes=sizes,
    )
    pop = design.generate_population(spec, substream(config.seed, "population"))
    if pc.cache:
        design.write_population(pop, pc.cache)
    return pop


# ---------------------------------------------------------------------------
# single run


def _labels(config: ExperimentConfig) -> list[tuple[str, "tuple[int, int] | None"]]:
    out = []
    for method in config.methods:
        if method in DESIGN_ONLY:
            out.append((method, None))
        else:
            out.extend((method, s) for s in config.settings)
    return out


def _setting_name(setting) -> str:
    return "-" if setting is None else f"M{setting[0]}R{setting[1]}"


def run_once(config: ExperimentConfig, pop: design.FinitePopulation, s: int) -> dict:
    """All configured methods on parent sample s.

    Returns ``{(method, setting): (estimate, variance, raw_variance, adjusted, low, high)}``
    plus per-method wall time under the key ``"_time"``.
    """
    level = config.level
    draw = design.draw_pps if config.design == "pps" else design.draw_srs
    sample = draw(pop, config.n, substream(config.seed, s, "sample"))
    n, N = sample.n, sample.population_size
    out: dict = {}
    timing: dict[str, float] = {}

    def plain(method, pv, df):
        low, high = interval(pv.estimate, pv.variance, df, level)
        out[(method, None)] = (pv.estimate, pv.variance, pv.variance, False, low, high)

    methods = set(config.methods)
    t0 = time.perf_counter()
    if "direct" in methods:
        plain("direct", design.estimate_direct(sample), n - 1)
    if "ht" in methods:
        plain("ht", design.estimate_ht(sample), n - 1)
    if "srssyn" in methods:
        plain("srssyn", design.estimate_srssyn(sample, 0, substream(config.seed, s, "srssyn")), n - 1)
    timing["design"] = time.perf_counter() - t0

    if not methods - set(DESIGN_ONLY):
        out["_time"] = timing
        return out

    M_max = max(M for M, _ in config.settings)
    R_max = max(R for _, R in config.settings)
    t0 = time.perf_counter()
    stage = run_wfpbb_stage(
        sample, M_max, config.mode, child_seed(config.seed, s, "wfpbb"), scheme=config.bootstrap
    )
    timing["wfpbb"] = time.perf_counter() - t0
    spec = EstimandSpec("mean", 0)

    def record(method, setting, est):
        out[(method, setting)] = (est.point, est.variance, est.raw_variance, est.adjusted, est.ci_low, est.ci_high)

    if "pseudo-pop" in methods:
        means = np.array([d.summary.mean[0] for d in stage])
        for setting in config.settings:
            record("pseudo-pop", setting, combine_pseudo_pop(means[: setting[0]], level))
    if "pseudo-srs" in methods:
        pv = [estimand_on_srs(d.srs, spec, N) for d in stage]
        q = np.array([p.estimate for p in pv])
        v = np.array([p.variance for p in pv])
        for setting in config.settings:
            record("pseudo-srs", setting, combine_pseudo_srs(q[: setting[0]], v[: setting[0]], level))

    srs = [d.srs for d in stage]
    synth = SynthesizerSpec(config.synthesizer, 0)
    if "synrep-r" in methods:
        t0 = time.perf_counter()
        rset = synthesize_release(srs, Variant.SYNREP_R, synth, child_seed(config.seed, s, "synrep-r"), R=R_max, N=N)
        st = ReplicateStatistics.from_release(rset, spec)
        for M, R in config.settings:
            record("synrep-r", (M, R), combine_synrep_r(st.subset(M, R), level))
        timing["synrep-r"] = time.perf_counter() - t0
    if "synrep-1" in methods:
        t0 = time.perf_counter()
        rset = synthesize_release(srs, Variant.SYNREP_1, synth, child_seed(config.seed, s, "synrep-1"), R=1, N=N)
        st = ReplicateStatistics.from_release(rset, spec)
        for M, R in config.settings:
            record("synrep-1", (M, R), combine_synrep_1(st.subset(M, 1), level))
        timing["synrep-1"] = time.perf_counter() - t0
    out["_time"] = timing
    return out


# ---------------------------------------------------------------------------
# worker pool

_WORKER: dict = {}


def _init_worker(config, pop):
    _WORKER["config"] = config
    _WORKER["pop"] = pop


def _safe_run(config, pop, s):
    import warnings

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return s, run_once(config, pop, s), None
    except (ArithmeticError, ValueError, FloatingPointError) as exc:
        return s, None, f"{type(exc).__name__}: {exc}"


def _worker_chunk(runs):
    return [_safe_run(_WORKER["config"], _WORKER["pop"], s) for s in runs]


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class MethodResult:
    method: str
    setting: str
    M: int
    R: int
    runs: int
    percent_bias: float
    bias_se: float
    coverage: float
    coverage_se: float
    variance_ratio: float
    negative_variance_rate: float
    mean_runtime: "float | None" = None

    def __post_init__(self):
        if not (0 <= self.coverage <= 1 and 0 <= self.negative_variance_rate <= 1):
            raise ValueError("coverage and negative-variance rate must lie in [0, 1]")


@dataclass
class SimulationReport:
    config: dict
    true_mean: float
    results: list[MethodResult]
    failures: list = field(default_factory=list)
    raw: "dict | None" = field(default=None, repr=False, compare=False)

    def get(self, method: str, setting: "str | tuple | None" = None) -> MethodResult:
        if isinstance(setting, tuple) or setting is None:
            setting = _setting_name(setting)
        for r in self.results:
            if r.method == method and r.setting == setting:
                return r
        raise KeyError((method, setting))

    def to_dict(self, include_runtime: bool = False) -> dict:
        results = []
        for r in self.results:
            d = asdict(r)
            if not include_runtime:
                d.pop("mean_runtime")
            results.append(d)
        return {
            "config": self.config,
            "true_mean": self.true_mean,
            "results": results,
            "failures": [list(f) for f in self.failures],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationReport":
        return cls(
            config=d["config"],
            true_mean=d["true_mean"],
            results=[MethodResult(**r) for r in d["results"]],
            failures=[tuple(f) for f in d.get("failures", [])],
        )


def _aggregate(config, labels, Q, records, times) -> list[MethodResult]:
    S = len(records)
    results = []
    for k, (method, setting) in enumerate(labels):
        est = np.array([rec[k][0] for rec in records])
        var = np.array([rec[k][1] for rec in records])
        raw = np.array([rec[k][2] for rec in records])
        low = np.array([rec[k][4] for rec in records])
        high = np.array([rec[k][5] for rec in records])
        cover = float(np.mean((low <= Q) & (Q <= high)))
        emp_var = math.fsum((est - est.mean()) ** 2) / (S - 1)
        ratio = (math.fsum(var) / S) / emp_var if emp_var > 0 else float("inf")
        family = "design" if method in DESIGN_ONLY else method
        runtime = None
        if times:
            parts = [t.get(family, 0.0) + (t.get("wfpbb", 0.0) if method not in DESIGN_ONLY else 0.0) for t in times]
            runtime = math.fsum(parts) / len(parts)
        results.append(
            MethodResult(
                method=method,
                setting=_setting_name(setting),
                M=setting[0] if setting else 0,
                R=setting[1] if setting else 0,
                runs=S,
                percent_bias=100 * math.fsum(est - Q) / (S * Q),
                bias_se=100 * math.sqrt(emp_var / S) / abs(Q),
                coverage=cover,
                coverage_se=math.sqrt(cover * (1 - cover) / S),
                variance_ratio=ratio,
                negative_variance_rate=float(np.mean(raw <= 0)) if method in ("pseudo-srs", "synrep-r", "synrep-1") else 0.0,
                mean_runtime=runtime,
            )
        )
    return results


def run_experiment(config: ExperimentConfig, workers: "int | None" = None, keep_raw: bool = False) -> SimulationReport:
    """Run S replications and aggregate per method and (M, R) setting.

    Aborts with :class:`ExperimentAborted` when more than 1% of runs fail
    numerically. Negative variance estimates are tracked, not failures.
    """
    workers = workers or config.workers or int(os.environ.get("SYNREP_THREADS", "1"))
    pop = build_population(config)
    Q = pop.true_mean
    labels = _labels(config)
    runs = list(range(1, config.S + 1))

    if workers == 1:
        outcomes = [_safe_run(config, pop, s) for s in runs]
    else:
        chunks = [runs[i::workers * 4] for i in range(workers * 4)]
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(config, pop)) as pool:
            outcomes = [o for chunk in pool.map(_worker_chunk, chunks) for o in chunk]
    outcomes.sort(key=lambda o: o[0])

    failures = [(s, msg) for s, _, msg in outcomes if msg is not None]
    if len(failures) > 0.01 * config.S:
        raise ExperimentAborted(
            f"{len(failures)} of {config.S} runs failed; first: run {failures[0][0]}: {failures[0][1]}"
        )
    good = [(s, out) for s, out, msg in outcomes if msg is None]
    records = [[out[label] for label in labels] for _, out in good]
    times = [out["_time"] for _, out in good]
    report = SimulationReport(config.to_dict(), Q, _aggregate(config, labels, Q, records, times), failures)
    if keep_raw:
        report.raw = {"runs": [s for s, _ in good], "labels": labels, "records": records}
    return report


def negative_variance_table(report: SimulationReport) -> list[tuple[str, str, float]]:
    """``(setting, method, percent negative)`` for methods whose rule can go negative."""
    rows = [
        (r.setting, r.method, 100 * r.negative_variance_rate)
        for r in report.results
        if r.method in ("pseudo-srs", "synrep-r", "synrep-1")
    ]
    order = {m: i for i, m in enumerate(("pseudo-srs", "synrep-r", "synrep-1"))}
    return sorted(rows, key=lambda row: (_setting_sort(row[0]), order[row[1]]))


def _setting_sort(name: str):
    if name == "-":
        return (0, 0)
    M, R = name[1:].split("R")
    return (int(M), -int(R))


def _markdown(report: SimulationReport, include_runtime: bool) -> str:
    buf = io.StringIO()
    cfg = report.config
    buf.write(f"# Simulation report ({cfg['design'].upper()} design, S={cfg['S']}, n={cfg['n']})\n\n")
    buf.write(f"Population mean Q = {report.true_mean:.4f}\n\n")
    head = ["method", "setting", "% bias", "bias SE", "variance ratio", "coverage", "coverage SE", "% negative"]
    if include_runtime:
        head.append("runtime (s)")
    buf.write("| " + " | ".join(head) + " |\n")
    buf.write("|" + "---|" * len(head) + "\n")
    for r in report.results:
        cells = [
            r.method,
            r.setting,
            f"{r.percent_bias:.3f}",
            f"{r.bias_se:.3f}",
            f"{r.variance_ratio:.3f}",
            f"{r.coverage:.3f}",
            f"{r.coverage_se:.3f}",
            f"{100 * r.negative_variance_rate:.1f}",
        ]
        if include_runtime:
            cells.append("" if r.mean_runtime is None else f"{r.mean_runtime:.4f}")
        buf.write("| " + " | ".join(cells) + " |\n")
    rows = negative_variance_table(report)
    if rows:
        buf.write("\n## Negative variance estimates\n\n| setting | method | % negative |\n|---|---|---|\n")
        for setting, method, pct in rows:
            buf.write(f"| {setting} | {method} | {pct:.1f} |\n")
    if report.failures:
        buf.write(f"\n{len(report.failures)} failed runs excluded.\n")
    return buf.getvalue()


def emit_report(report: SimulationReport, path, format: str = "json", include_runtime: bool = False) -> None:
    """Write the report as ``json``, ``csv`` (columns :data:`CSV_COLUMNS`) or ``markdown``."""
    path = Path(path)
    if format == "json":
        text = json.dumps(report.to_dict(include_runtime), indent=2) + "\n"
    elif format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.results:
            row = asdict(r)
            if not include_runtime or row["mean_runtime"] is None:
                row["mean_runtime"] = ""
            w.writerow([row[c] for c in CSV_COLUMNS])
        text = buf.getvalue()
    elif format in ("markdown", "md"):
        text = _markdown(report, include_runtime)
    else:
        raise ValueError(f"unknown report format {format!r}")
    path.write_text(text)


def emit_raw(report: SimulationReport, path) -> None:
    """Per-run estimates for external plotting; requires ``keep_raw=True``."""
    if report.raw is None:
        raise ValueError("report was produced without keep_raw=True")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "method", "setting", "estimate", "variance", "raw_variance", "adjusted", "ci_low", "ci_high"])
        for s, rec in zip(report.raw["runs"], report.raw["records"]):
            for (method, setting), vals in zip(report.raw["labels"], rec):
                est, var, raw, adj, low, high = vals
                w.writerow([s, method, _setting_name(setting), repr(est), repr(var), repr(raw), int(adj), repr(low), repr(high)])
