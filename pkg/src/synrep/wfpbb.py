"""Weighted finite population Bayesian bootstrap.

Pipeline per repetition m: bootstrap the parent sample and renormalise its
weights, expand the bootstrap sample into a pseudo-population with a weighted
Polya urn, then take a simple random sample of size n from it.

Pseudo-populations are stored as multiplicities over parent rows, never as
copied value vectors. They are confidential-side objects.
"""
from __future__ import annotations

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SynRepError, WeightedSample, as_generator, resolve_column, substream

__all__ = [
    "Mode",
    "BootstrapScheme",
    "TRUNCATION_FACTOR",
    "DegenerateUrnError",
    "BootstrapSample",
    "UrnState",
    "PseudoPopulation",
    "PopulationSummary",
    "StageDraw",
    "renormalize_weights",
    "bayesian_bootstrap",
    "polya_probabilities",
    "expansion_target",
    "expand_pseudo_population",
    "draw_pseudo_srs",
    "draw_pseudo_srs_counts",
    "run_wfpbb_stage",
    "dump_pseudo_population",
]

TRUNCATION_FACTOR = 50


class Mode(str, enum.Enum):
    FULL = "full"
    TRUNCATED = "truncated"


class BootstrapScheme(str, enum.Enum):
    # n draws with equal probabilities 1/n
    UNIFORM = "uniform"
    # Dirichlet(1, ..., 1) probabilities, then n multinomial draws
    DIRICHLET = "dirichlet"


class DegenerateUrnError(SynRepError, ArithmeticError):
    code = "E_URN"


def renormalize_weights(weights: np.ndarray, counts: np.ndarray, population_size: int) -> np.ndarray:
    """``N w_i r_i / sum_k w_k r_k``."""
    wr = np.asarray(weights, dtype=float) * np.asarray(counts, dtype=float)
    return population_size * wr / wr.sum()


@dataclass(frozen=True, eq=False)
class BootstrapSample:
    counts: np.ndarray
    renormalized_weights: np.ndarray
    population_size: int

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        w = np.array(self.renormalized_weights, dtype=float)
        n = counts.size
        if counts.ndim != 1 or w.shape != counts.shape:
            raise ValueError("counts and weights must be equal-length vectors")
        if counts.min() < 0 or counts.sum() != n:
            raise ValueError(f"bootstrap counts must be nonnegative and sum to n={n}")
        N = self.population_size
        if abs(w.sum() - N) > 1e-9 * N:
            raise ValueError("renormalized weights must sum to N")
        if not np.array_equal(w == 0, counts == 0):
            raise ValueError("a renormalized weight is zero exactly when its count is zero")
        counts.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "renormalized_weights", w)

    @property
    def n(self) -> int:
        return self.counts.size


def bayesian_bootstrap(
    sample: WeightedSample, seed, scheme: "BootstrapScheme | str" = BootstrapScheme.UNIFORM
) -> BootstrapSample:
    """Resample the parent units and renormalise weights to sum to N.

    ``scheme="dirichlet"`` draws probabilities from Dirichlet(1, ..., 1) by
    the uniform-gaps construction before the n multinomial draws; its counts
    have roughly twice the variance of the ``"uniform"`` scheme.
    """
    rng = as_generator(seed)
    n = sample.n
    scheme = BootstrapScheme(scheme)
    if scheme is BootstrapScheme.DIRICHLET:
        cuts = np.sort(rng.uniform(size=n - 1))
        probs = np.diff(np.concatenate(([0.0], cuts, [1.0])))
    else:
        probs = np.full(n, 1.0 / n)
    counts = rng.multinomial(n, probs)
    weights = renormalize_weights(sample.weights, counts, sample.population_size)
    return BootstrapSample(counts, weights, sample.population_size)


def expansion_target(n: int, population_size: int, mode: "Mode | str") -> int:
    mode = Mode(mode)
    target = population_size - n if mode is Mode.FULL else TRUNCATION_FACTOR * n
    if target <= 0:
        raise ValueError(f"expansion target must be positive, got {target}")
    return target


@dataclass(eq=False)
class UrnState:
    """Mutable Polya urn over the n parent units.

    ``base_weights`` has one entry per parent unit; units that the bootstrap
    did not select carry weight 0 and never receive mass. ``tallies`` counts
    urn selections so far, so ``tallies.sum() == draws_made``.
    """

    base_weights: np.ndarray
    expansion_target: int
    tallies: np.ndarray = None
    draws_made: int = 0

    def __post_init__(self):
        self.base_weights = np.asarray(self.base_weights, dtype=float)
        if self.tallies is None:
            self.tallies = np.zeros(self.base_weights.size, dtype=np.int64)
        else:
            self.tallies = np.array(self.tallies, dtype=np.int64)
        if self.expansion_target <= 0:
            raise ValueError("expansion target must be positive")
        if self.tallies.shape != self.base_weights.shape or self.tallies.min() < 0:
            raise ValueError("tallies must be nonnegative with one entry per unit")
        if self.tallies.sum() != self.draws_made or not 0 <= self.draws_made <= self.expansion_target:
            raise ValueError("tallies must sum to draws_made and 0 <= draws_made <= target")

    @property
    def n(self) -> int:
        return self.base_weights.size

    @property
    def increment(self) -> float:
        return self.expansion_target / self.n

    def record(self, i: int) -> None:
        if self.draws_made >= self.expansion_target:
            raise ValueError("urn already fully expanded")
        self.tallies[i] += 1
        self.draws_made += 1


def polya_probabilities(state: UrnState) -> np.ndarray:
    """Selection probabilities for the next draw from the urn.

    ``p_i = (w_i - 1 + l_i T/n) / (T + k T/n)`` with T the expansion target and
    k the draws made so far. With T = N - n and weights summing to N the
    vector sums to one exactly. Negative numerators (weights below 1) are set
    to zero; after clamping, or when truncation breaks the telescoping sum,
    the vector is renormalised.
    """
    if state.draws_made >= state.expansion_target:
        raise ValueError("urn already fully expanded")
    T, n = state.expansion_target, state.n
    inc = T / n
    num = state.base_weights - 1.0 + state.tallies * inc
    clamped = num < 0
    if clamped.any():
        num = np.where(clamped, 0.0, num)
    total = num.sum()
    if not total > 0:
        raise DegenerateUrnError("every urn numerator is nonpositive")
    telescopes = abs(state.base_weights.sum() - (n + T)) <= 1e-9 * (n + T)
    if clamped.any() or not telescopes:
        return num / total
    return num / (T + state.draws_made * inc)


@dataclass(frozen=True)
class PopulationSummary:
    m: int
    size: int
    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True, eq=False)
class PseudoPopulation:
    """A WFPBB-completed population as multiplicities over parent rows."""

    parent_values: np.ndarray
    multiplicity: np.ndarray
    source_index: int
    mode: Mode
    population_size: int
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        mult = np.array(self.multiplicity, dtype=np.int64)
        vals = np.asarray(self.parent_values, dtype=float)
        if vals.ndim != 2 or mult.shape != (vals.shape[0],) or mult.min() < 0:
            raise ValueError("multiplicity must be a nonnegative vector over parent rows")
        mode = Mode(self.mode)
        n = vals.shape[0]
        expected = n + expansion_target(n, self.population_size, mode)
        if mult.sum() != expected:
            raise ValueError(f"{mode.value} pseudo-population must have {expected} rows, has {mult.sum()}")
        if self.source_index < 1:
            raise ValueError("source_index is 1-based")
        mult.flags.writeable = False
        object.__setattr__(self, "multiplicity", mult)
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "columns", tuple(self.columns) or tuple(f"v{j + 1}" for j in range(vals.shape[1])))

    @property
    def size(self) -> int:
        return int(self.multiplicity.sum())

    @property
    def rows(self) -> np.ndarray:
        return np.repeat(self.parent_values, self.multiplicity, axis=0)

    def mean(self, column=0) -> float:
        j = resolve_column(self.columns, column)
        return float(self.multiplicity @ self.parent_values[:, j]) / self.size

    def summary(self) -> PopulationSummary:
        f = self.multiplicity / self.size
        mean = f @ self.parent_values
        var = f @ (self.parent_values - mean) ** 2 * self.size / (self.size - 1)
        return PopulationSummary(self.source_index, self.size, mean, var)


def _urn_counts_sequential(state: UrnState, rng: np.random.Generator) -> np.ndarray:
    # Reference path: one inverse-CDF draw per urn step.
    while state.draws_made < state.expansion_target:
        cdf = np.cumsum(polya_probabilities(state))
        i = int(np.searchsorted(cdf, rng.uniform() * cdf[-1], side="right"))
        state.record(min(i, state.n - 1))
    return state.tallies


def _urn_counts_collapsed(state: UrnState, rng: np.random.Generator) -> np.ndarray:
    # The urn adds one ball of mass T/n per draw, so after T draws the tallies
    # are Dirichlet-multinomial with concentrations max(w_i - 1, 0) n / T.
    alpha = np.maximum(state.base_weights - 1.0, 0.0) / state.increment
    live = alpha > 0
    if not live.any():
        raise DegenerateUrnError("every urn numerator is nonpositive")
    g = np.zeros_like(alpha)
    g[live] = rng.standard_gamma(alpha[live])
    if not g.sum() > 0:
        # all gamma draws underflowed; fall back to the limiting proportions
        g = alpha
    return rng.multinomial(state.expansion_target, g / g.sum())


def expand_pseudo_population(
    boot: BootstrapSample,
    sample: WeightedSample,
    mode: "Mode | str" = Mode.TRUNCATED,
    seed=None,
    source_index: int = 1,
    sampler: str = "collapsed",
) -> PseudoPopulation:
    """Complete the bootstrap sample into a pseudo-population.

    ``sampler="sequential"`` runs the urn draw by draw; ``"collapsed"`` draws
    the final tallies in one Dirichlet-multinomial step, which has the same
    distribution and costs O(n) instead of O(n T).
    """
    if boot.n != sample.n or boot.population_size != sample.population_size:
        raise ValueError("bootstrap sample does not belong to this parent sample")
    target = expansion_target(sample.n, sample.population_size, mode)
    state = UrnState(boot.renormalized_weights, target)
    rng = as_generator(seed)
    if sampler == "sequential":
        drawn = _urn_counts_sequential(state, rng)
    elif sampler == "collapsed":
        drawn = _urn_counts_collapsed(state, rng)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return PseudoPopulation(
        sample.values, boot.counts + drawn, source_index, Mode(mode), sample.population_size, sample.columns
    )


def draw_pseudo_srs_counts(pop: PseudoPopulation, n: int, seed) -> np.ndarray:
    """Multiplicities of a without-replacement SRS of size n."""
    if not 0 < n <= pop.size:
        raise ValueError(f"SRS size must be in 1..{pop.size}, got {n}")
    return as_generator(seed).multivariate_hypergeometric(pop.multiplicity, n)


def draw_pseudo_srs(pop: PseudoPopulation, n: int, seed) -> np.ndarray:
    """Simple random sample of n rows, returned as an ``(n, p)`` matrix in random order."""
    rng = as_generator(seed)
    counts = draw_pseudo_srs_counts(pop, n, rng)
    rows = np.repeat(pop.parent_values, counts, axis=0)
    return rows[rng.permutation(n)]


@dataclass(frozen=True, eq=False)
class StageDraw:
    m: int
    summary: PopulationSummary
    srs: np.ndarray
    population: "PseudoPopulation | None" = field(default=None, repr=False)


def _one_repetition(sample, m, mode, seed, scheme, sampler, keep):
    boot = bayesian_bootstrap(sample, substream(seed, m, "bootstrap"), scheme)
    pop = expand_pseudo_population(boot, sample, mode, substream(seed, m, "urn"), m, sampler)
    srs = draw_pseudo_srs(pop, sample.n, substream(seed, m, "srs"))
    srs.flags.writeable = False
    return StageDraw(m, pop.summary(), srs, pop if keep else None)


def run_wfpbb_stage(
    sample: WeightedSample,
    M: int,
    mode: "Mode | str" = Mode.TRUNCATED,
    seed=None,
    *,
    scheme: "BootstrapScheme | str" = BootstrapScheme.UNIFORM,
    sampler: str = "collapsed",
    keep_populations: bool = False,
    workers: int = 1,
) -> list[StageDraw]:
    """Steps 1-3 repeated M times on substreams keyed by ``(seed, m)``."""
    if M < 1:
        raise ValueError("M must be positive")
    if seed is None:
        raise ValueError("an explicit seed is required")
    if isinstance(seed, np.random.Generator):
        seed = np.random.SeedSequence(int(seed.integers(2**63)))
    args = [(sample, m, mode, seed, scheme, sampler, keep_populations) for m in range(1, M + 1)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda a: _one_repetition(*a), args))
    return [_one_repetition(*a) for a in args]


def dump_pseudo_population(pop: PseudoPopulation, path) -> None:
    """Debug dump of parent-row multiplicities. Confidential: never release."""
    path = Path(path)
    with path.open("w") as fh:
        meta = {"confidential": True, "m": pop.source_index, "mode": pop.mode.value, "size": pop.size}
        fh.write("# synrep-pseudo-population " + json.dumps(meta) + "\n")
        fh.write("parent_row,multiplicity\n")
        for i, c in enumerate(pop.multiplicity.tolist(), start=1):
            fh.write(f"{i},{c}\n")
