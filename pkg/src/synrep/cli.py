"""Command-line interface: ``synrep generate | analyze | simulate | validate``.

Failures print a single line ``error[CODE]: message`` on standard error and
exit nonzero (2 for flag misuse, 1 otherwise).
"""
from __future__ import annotations

import json
import sys
import warnings
from pathlib import Path

import click

from . import design, harness
from .core import (
    REPLICATE_MAGIC,
    CombinedEstimate,
    SynRepError,
    Variant,
    child_seed,
    read_replicates,
    read_sample,
    write_replicates,
)
from .inference import EstimandSpec, combine_release
from .synthesizer import SynthesizerSpec, available_synthesizers, synthesize_release
from .wfpbb import BootstrapScheme, Mode, run_wfpbb_stage

THREADS_ENV = "SYNREP_THREADS"


class CliError(click.ClickException):
    """One-line error with a machine-readable code."""

    def __init__(self, code: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code

    def show(self, file=None):
        click.echo(f"error[{self.code}]: {self.format_message()}", err=True)


def _fail(exc: BaseException) -> CliError:
    if isinstance(exc, SynRepError):
        return CliError(exc.code, str(exc))
    if isinstance(exc, OSError):
        return CliError("E_IO", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc))
    if isinstance(exc, json.JSONDecodeError):
        return CliError("E_PARSE", f"invalid JSON: {exc}")
    return CliError("E_VALUE", str(exc))


def _column(value: str) -> "int | str":
    return int(value) if value.isdigit() else value


class _Group(click.Group):
    def main(self, args=None, prog_name=None, **extra):
        extra.pop("standalone_mode", None)
        try:
            rv = super().main(args, prog_name, standalone_mode=False, **extra)
        except click.Abort:
            click.echo("error[E_ABORTED]: interrupted", err=True)
            sys.exit(1)
        except CliError as exc:
            exc.show()
            sys.exit(exc.exit_code)
        except click.ClickException as exc:
            click.echo(f"error[E_USAGE]: {exc.format_message()}", err=True)
            sys.exit(exc.exit_code)
        sys.exit(rv if isinstance(rv, int) else 0)


@click.group(cls=_Group)
@click.version_option(package_name="artifact", prog_name="synrep")
def main():
    """Synthetic replicates from complex survey samples."""


@main.command()
@click.argument("sample", type=click.Path(dir_okay=False))
@click.option("-N", "--population-size", type=int, help="Population size N (else read from <sample>.meta.json).")
@click.option("--weight-column", default="weight", show_default=True)
@click.option("--variant", type=click.Choice([v.value for v in Variant]), required=True)
@click.option("-M", "M", type=int, required=True, help="Number of pseudo-populations.")
@click.option("-R", "R", type=int, default=None, help="Replicates per pseudo-SRS (synrep-r only).")
@click.option("--synthesizer", default="normal-bayes", show_default=True)
@click.option("--column", default="0", show_default=True, help="Variable to synthesize, by name or 0-based index.")
@click.option("--mode", type=click.Choice([m.value for m in Mode]), default=Mode.TRUNCATED.value, show_default=True)
@click.option("--bootstrap", type=click.Choice([b.value for b in BootstrapScheme]), default="uniform", show_default=True)
@click.option("--seed", type=int, required=True, help="Master seed (required).")
@click.option("--threads", type=int, envvar=THREADS_ENV, default=1, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
def generate(sample, population_size, weight_column, variant, M, R, synthesizer, column, mode, bootstrap, seed, threads, output):
    """Build a synthetic release from a confidential weighted sample."""
    variant = Variant(variant)
    if variant is Variant.SYNREP_1 and R not in (None, 1):
        raise CliError("E_USAGE", f"synrep-1 releases exactly one replicate per pseudo-SRS; got -R {R}", 2)
    if variant is Variant.SYNREP_R and (R is None or R < 2):
        raise CliError("E_USAGE", "synrep-r needs -R >= 2", 2)
    if M < 2:
        raise CliError("E_USAGE", "-M must be at least 2", 2)
    if synthesizer not in available_synthesizers():
        raise CliError("E_USAGE", f"unknown synthesizer {synthesizer!r}; known: {', '.join(available_synthesizers())}", 2)
    R = R or 1
    try:
        parent = read_sample(sample, weight_column, population_size)
        j = parent.column_index(_column(column))
        stage = run_wfpbb_stage(
            parent, M, mode, child_seed(seed, "wfpbb"), scheme=bootstrap, workers=max(1, threads)
        )
        spec = SynthesizerSpec(synthesizer, j)
        rset = synthesize_release(
            [d.srs for d in stage], variant, spec, child_seed(seed, "synthesis"), R=R, N=parent.population_size, columns=parent.columns
        )
        write_replicates(rset, output)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        raise _fail(exc) from exc
    click.echo(f"wrote {output}: variant={variant.value} M={M} R={R} n={parent.n} N={parent.population_size} seed={seed}")


@main.command()
@click.argument("replicates", type=click.Path(dir_okay=False))
@click.option("--column", default="0", show_default=True, help="Analysis variable, by name or 0-based index.")
@click.option("--level", type=float, default=0.95, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="JSON output path (default: standard output).")
def analyze(replicates, column, level, output):
    """Combine a release into a point estimate, variance and interval."""
    try:
        rset = read_replicates(replicates)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            est = combine_release(rset, EstimandSpec("mean", _column(column)), level)
        text = json.dumps(est.to_dict(), indent=2) + "\n"
        if output:
            Path(output).write_text(text)
        else:
            click.echo(text, nl=False)
    except Exception as exc:  # noqa: BLE001
        raise _fail(exc) from exc
    for w in caught:
        click.echo(f"warning: {w.message}", err=True)
    if est.adjusted:
        click.echo(
            f"warning: raw variance {est.raw_variance:.6g} was not positive; the ad hoc adjustment was used",
            err=True,
        )


@main.command()
@click.argument("config")
@click.option("-o", "--output-dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, required=True, help="Master seed; overrides the config's seed.")
@click.option("--threads", type=int, envvar=THREADS_ENV, default=None, help="Worker processes (default: config).")
@click.option(
    "--format", "formats", multiple=True, type=click.Choice(["json", "csv", "markdown"]),
    help="Report formats (repeatable; default all three).",
)
@click.option("--timing/--no-timing", default=False, help="Include wall-clock runtimes in the reports.")
@click.option("--raw", is_flag=True, help="Also write per-run estimates to raw.csv.")
@click.option("-S", "S", type=int, default=None, help="Override the number of replications.")
def simulate(config, output_dir, seed, threads, formats, timing, raw, S):
    """Run a repeated-sampling study from a JSON config (path or shipped name)."""
    try:
        cfg = harness.load_config(config) if Path(config).exists() else harness.shipped_config(config)
        changes = {"seed": seed}
        if S is not None:
            changes["S"] = S
        cfg = cfg.replace(**changes)
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        report = harness.run_experiment(cfg, workers=threads, keep_raw=raw)
        suffix = {"json": "json", "csv": "csv", "markdown": "md"}
        for fmt in formats or ("json", "csv", "markdown"):
            harness.emit_report(report, out / f"report.{suffix[fmt]}", fmt, include_runtime=timing)
        if raw:
            harness.emit_raw(report, out / "raw.csv")
    except FileNotFoundError as exc:
        raise CliError("E_CONFIG", f"config not found: {config}") from exc
    except Exception as exc:  # noqa: BLE001
        raise _fail(exc) from exc
    click.echo(f"wrote reports to {out} (S={cfg.S}, Q={report.true_mean:.6g}, failures={len(report.failures)})")


def _detect(path: Path) -> str:
    with path.open() as fh:
        first = fh.readline()
    if first.startswith(REPLICATE_MAGIC):
        return "replicates"
    if first.startswith(design.POPULATION_MAGIC):
        return "population"
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        if isinstance(data, dict) and {"point", "variance", "ci"} <= set(data):
            return "estimate"
        if isinstance(data, dict) and {"results", "true_mean"} <= set(data):
            return "report"
        return "config"
    return "sample"


@main.command()
@click.argument("artifact", type=click.Path(dir_okay=False))
@click.option("-N", "--population-size", type=int, help="N for a sample file without a sidecar.")
@click.option("--weight-column", default="weight", show_default=True)
def validate(artifact, population_size, weight_column):
    """Check any artifact (sample, release, estimate, config, report, population)."""
    path = Path(artifact)
    try:
        kind = _detect(path)
        if kind == "replicates":
            r = read_replicates(path)
            detail = f"variant={r.variant.value} M={r.M} R={r.R} n={r.n} N={r.N}"
        elif kind == "population":
            pop = design.read_population(path)
            detail = f"N={pop.N} Q={pop.true_mean:.6g}"
        elif kind == "estimate":
            est = CombinedEstimate.from_dict(json.loads(path.read_text()))
            detail = f"point={est.point:.6g} variance={est.variance:.6g} adjusted={est.adjusted}"
        elif kind == "report":
            rep = harness.SimulationReport.from_dict(json.loads(path.read_text()))
            detail = f"{len(rep.results)} result rows"
        elif kind == "config":
            cfg = harness.ExperimentConfig.from_dict(json.loads(path.read_text()))
            detail = f"design={cfg.design} n={cfg.n} S={cfg.S}"
        else:
            s = read_sample(path, weight_column, population_size)
            detail = f"n={s.n} N={s.population_size} columns={','.join(s.columns)}"
    except Exception as exc:  # noqa: BLE001
        raise _fail(exc) from exc
    click.echo(f"ok: {kind} {detail}")


if __name__ == "__main__":  # pragma: no cover
    main()
