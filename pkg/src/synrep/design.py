"""Finite populations, PPS/SRS selection and design-based comparison estimators."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import PointVariance, SchemaError, WeightedSample, as_generator

__all__ = [
    "SizeDistribution",
    "SyntheticPopulationSpec",
    "FinitePopulation",
    "CertaintyWarning",
    "generate_population",
    "draw_pps",
    "draw_srs",
    "pps_inclusion_probabilities",
    "estimate_direct",
    "estimate_ht",
    "estimate_srssyn",
    "read_size_file",
    "write_population",
    "read_population",
]

POPULATION_MAGIC = "# synrep-population "


class CertaintyWarning(UserWarning):
    """Too many units reach inclusion probability 1 under PPS."""


@dataclass(frozen=True)
class SizeDistribution:
    """Heavy-tailed size measure: clipped lognormal with a target mean and CV.

    The default CV of 0.88 makes an unweighted mean under PPS overshoot the
    population mean of ``20 + 0.2 X + e`` by roughly 39%.
    """

    mean: float = 102.0
    cv: float = 0.88
    lower: float = 1.0
    upper: float = 3223.0

    def __post_init__(self):
        if not (self.mean > 0 and self.cv > 0 and 0 < self.lower < self.upper):
            raise SchemaError("size distribution needs mean > 0, cv > 0 and 0 < lower < upper")

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        s2 = math.log1p(self.cv**2)
        mu = math.log(self.mean) - s2 / 2
        return np.clip(rng.lognormal(mu, math.sqrt(s2), size), self.lower, self.upper)


@dataclass(frozen=True)
class SyntheticPopulationSpec:
    """``Y = intercept + slope * X + e`` with ``e ~ N(0, noise_sd^2)``.

    Sizes come from ``sizes`` (resampled with replacement when its length
    differs from N) or from ``size_distribution``.
    """

    N: int = 100_000
    intercept: float = 20.0
    slope: float = 0.2
    noise_sd: float = 100.0
    size_distribution: SizeDistribution = SizeDistribution()
    sizes: "tuple[float, ...] | None" = None

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1000:
            raise SchemaError(f"population size N must be an integer >= 1000, got {self.N}")
        if not (self.noise_sd > 0):
            raise SchemaError("noise_sd must be positive")
        if self.sizes is not None:
            sizes = np.asarray(self.sizes, dtype=float)
            if sizes.size == 0 or not np.all(np.isfinite(sizes) & (sizes > 0)):
                raise SchemaError("size values must be positive and finite")


@dataclass(frozen=True, eq=False)
class FinitePopulation:
    sizes: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        sizes = np.array(self.sizes, dtype=float)
        y = np.array(self.y, dtype=float)
        if sizes.shape != y.shape or sizes.ndim != 1:
            raise SchemaError("sizes and y must be equal-length vectors")
        if not np.all(np.isfinite(sizes) & (sizes > 0)):
            raise SchemaError("sizes must be positive and finite")
        sizes.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def true_mean(self) -> float:
        return math.fsum(self.y) / self.N


def generate_population(spec: SyntheticPopulationSpec, seed) -> FinitePopulation:
    rng = as_generator(seed)
    if spec.sizes is not None:
        pool = np.asarray(spec.sizes, dtype=float)
        sizes = pool.copy() if pool.size == spec.N else rng.choice(pool, size=spec.N, replace=True)
    else:
        sizes = spec.size_distribution.sample(spec.N, rng)
    y = spec.intercept + spec.slope * sizes + rng.normal(0.0, spec.noise_sd, spec.N)
    return FinitePopulation(sizes, y)


def pps_inclusion_probabilities(sizes: np.ndarray, n: int) -> np.ndarray:
    """``pi_i = min(1, n x_i / sum x)`` with the excess redistributed.

    Units capped at 1 are removed and the remaining probabilities recomputed
    on ``n - #certainty`` until no new unit crosses 1, so the vector sums to n.
    """
    sizes = np.asarray(sizes, dtype=float)
    pi = np.zeros_like(sizes)
    certain = np.zeros(sizes.shape, dtype=bool)
    while True:
        k = int(certain.sum())
        rest = ~certain
        pi[rest] = (n - k) * sizes[rest] / sizes[rest].sum()
        pi[certain] = 1.0
        newly = rest & (pi >= 1.0)
        if not newly.any():
            return pi
        certain |= newly


def draw_pps(pop: FinitePopulation, n: int, seed) -> WeightedSample:
    """Systematic PPS without replacement on a randomly permuted list."""
    N = pop.N
    if not 1 < n < N:
        raise ValueError(f"need 2 <= n < N, got n={n}, N={N}")
    rng = as_generator(seed)
    pi = pps_inclusion_probabilities(pop.sizes, n)
    certain = np.flatnonzero(pi >= 1.0)
    if certain.size > 0.2 * n:
        warnings.warn(
            f"{certain.size} of {n} PPS selections are certainty units", CertaintyWarning, stacklevel=2
        )
    rest = np.flatnonzero(pi < 1.0)
    k = n - certain.size
    chosen = certain
    if k > 0:
        order = rest[rng.permutation(rest.size)]
        cum = np.cumsum(pi[order])
        points = rng.uniform() + np.arange(k)
        hit = np.minimum(np.searchsorted(cum, points, side="left"), order.size - 1)
        chosen = np.concatenate([certain, order[hit]])
    chosen = np.sort(chosen)
    return WeightedSample(1.0 / pi[chosen], pop.y[chosen][:, None], N, ("y",))


def draw_srs(pop: FinitePopulation, n: int, seed) -> WeightedSample:
    N = pop.N
    if not 1 < n < N:
        raise ValueError(f"need 2 <= n < N, got n={n}, N={N}")
    rng = as_generator(seed)
    chosen = np.sort(rng.choice(N, size=n, replace=False))
    return WeightedSample(np.full(n, N / n), pop.y[chosen][:, None], N, ("y",))


def _mean_var(y: np.ndarray) -> tuple[float, float]:
    mean = math.fsum(y) / y.size
    return mean, math.fsum((y - mean) ** 2) / (y.size - 1)


def estimate_direct(sample: WeightedSample, column=0) -> PointVariance:
    """Unweighted mean with ``s^2 / n``; ignores the design."""
    y = sample.column(column)
    mean, s2 = _mean_var(y)
    return PointVariance(mean, s2 / y.size)


def estimate_ht(sample: WeightedSample, column=0) -> PointVariance:
    """Horvitz-Thompson mean ``sum(w y) / N``.

    The variance uses the with-replacement approximation
    ``sum((n w_i y_i - sum w y)^2) / (N^2 n (n - 1))``, which is accurate when
    the sampling fraction is small.
    """
    y = sample.column(column)
    n, N = y.size, sample.population_size
    wy = sample.weights * y
    total = math.fsum(wy)
    var = math.fsum((n * wy - total) ** 2) / (N**2 * n * (n - 1))
    return PointVariance(total / N, var)


def estimate_srssyn(sample: WeightedSample, column=0, seed=None) -> PointVariance:
    """Plug-in normal synthesis that ignores the weights.

    Draws n values from ``N(mean, sd^2)`` of the unweighted sample and returns
    their mean and ``s^2 / n``.
    """
    y = sample.column(column)
    mean, s2 = _mean_var(y)
    if s2 == 0:
        return PointVariance(mean, 0.0)
    synth = as_generator(seed).normal(mean, math.sqrt(s2), y.size)
    m2, v2 = _mean_var(synth)
    return PointVariance(m2, v2 / y.size)


# ---------------------------------------------------------------------------
# optional files


def read_size_file(path) -> np.ndarray:
    """Single-column CSV of positive sizes; a non-numeric first line is a header."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    out = []
    for i, line in enumerate(lines):
        cell = line.split(",")[0]
        try:
            out.append(float(cell))
        except ValueError:
            if i == 0:
                continue
            raise SchemaError(f"size file line {i + 1}: {cell!r} is not numeric") from None
    sizes = np.array(out)
    if sizes.size == 0 or not np.all(np.isfinite(sizes) & (sizes > 0)):
        raise SchemaError("size file must contain positive finite values")
    return sizes


def write_population(pop: FinitePopulation, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(POPULATION_MAGIC + json.dumps({"N": pop.N, "true_mean": pop.true_mean}) + "\n")
        fh.write("x,y\n")
        for x, y in zip(pop.sizes, pop.y):
            fh.write(f"{x:.17g},{y:.17g}\n")


def read_population(path) -> FinitePopulation:
    path = Path(path)
    with path.open() as fh:
        first = fh.readline()
        if not first.startswith(POPULATION_MAGIC):
            raise SchemaError("missing synrep-population metadata line")
        meta = json.loads(first[len(POPULATION_MAGIC):])
        data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
    pop = FinitePopulation(data[:, 0], data[:, 1])
    if pop.N != meta["N"] or not math.isclose(pop.true_mean, meta["true_mean"], rel_tol=1e-12, abs_tol=1e-12):
        raise SchemaError("population cache metadata disagrees with its rows")
    return pop
