"""Synthesis models and release assembly.

A synthesizer is anything with ``fit(spec, data) -> model`` where the model
has ``generate(n, rng) -> (n, 1) array``. New kinds are added with
:func:`register_synthesizer`; the release and simulation code only use that
contract.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .core import ReplicateSet, SchemaError, Variant, as_generator, substream

__all__ = [
    "SynthesizerSpec",
    "FittedSynthesizer",
    "DegenerateModelWarning",
    "register_synthesizer",
    "available_synthesizers",
    "fit",
    "generate",
    "synthesize_release",
]


class DegenerateModelWarning(UserWarning):
    """The fitted column is constant; synthetic values equal its mean."""


class Model(Protocol):
    kind: str

    def generate(self, n: int, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True)
class SynthesizerSpec:
    kind: str = "normal-bayes"
    column: "int | str" = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in _REGISTRY:
            raise SchemaError(f"unknown synthesizer {self.kind!r}; known: {', '.join(sorted(_REGISTRY))}")


@dataclass(frozen=True)
class FittedSynthesizer:
    """Sufficient statistics of a univariate normal fit."""

    kind: str
    n_fit: int
    mean: float
    variance: float
    name: str = "v1"

    def __post_init__(self):
        if self.n_fit < 2:
            raise ValueError("n_fit >= 2 required")
        if not (self.variance >= 0):
            raise ValueError("variance must be nonnegative")

    @property
    def degenerate(self) -> bool:
        return self.variance == 0

    def generate(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.degenerate:
            warnings.warn("degenerate model: all synthetic values equal the mean", DegenerateModelWarning, stacklevel=3)
            return np.full((n, 1), self.mean)
        if self.kind == "normal-plugin":
            return rng.normal(self.mean, math.sqrt(self.variance), (n, 1))
        # posterior under p(mu, sigma^2) ~ 1/sigma^2:
        # sigma^2 ~ (n-1) s^2 / chi2_{n-1},  mu | sigma^2 ~ N(ybar, sigma^2 / n)
        sigma2 = (self.n_fit - 1) * self.variance / rng.chisquare(self.n_fit - 1)
        mu = rng.normal(self.mean, math.sqrt(sigma2 / self.n_fit))
        return rng.normal(mu, math.sqrt(sigma2), (n, 1))


def _fit_normal(kind: str):
    def fitter(spec: SynthesizerSpec, data: np.ndarray, name: str) -> FittedSynthesizer:
        y = data[:, spec.column]
        mean = math.fsum(y) / y.size
        var = math.fsum((y - mean) ** 2) / (y.size - 1)
        return FittedSynthesizer(kind, y.size, mean, var, name)

    return fitter


_REGISTRY: dict[str, Callable] = {
    "normal-bayes": _fit_normal("normal-bayes"),
    "normal-plugin": _fit_normal("normal-plugin"),
}


def register_synthesizer(kind: str, fitter: Callable) -> None:
    """Register ``fitter(spec, data, name) -> model`` under ``kind``."""
    _REGISTRY[kind] = fitter


def available_synthesizers() -> list[str]:
    return sorted(_REGISTRY)


def fit(spec: SynthesizerSpec, data: np.ndarray, columns: Sequence[str] = ()) -> Model:
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] < 2:
        raise ValueError("fitting needs at least 2 rows")
    if isinstance(spec.column, str):
        if spec.column not in columns:
            raise SchemaError(f"column {spec.column!r} not among {list(columns)}")
        j = list(columns).index(spec.column)
    else:
        j = int(spec.column)
    if not 0 <= j < data.shape[1]:
        raise SchemaError(f"column index {j} out of range")
    name = spec.name or (columns[j] if columns else f"v{j + 1}")
    model = _REGISTRY[spec.kind](SynthesizerSpec(spec.kind, j, name), data, name)
    if getattr(model, "degenerate", False):
        warnings.warn("constant column: fitted variance is 0", DegenerateModelWarning, stacklevel=2)
    return model


def generate(model: Model, n: int, seed) -> np.ndarray:
    return model.generate(n, as_generator(seed))


def synthesize_release(
    stage_output: Sequence[np.ndarray],
    variant: "Variant | str",
    spec: SynthesizerSpec,
    seed,
    R: int = 1,
    N: "int | None" = None,
    columns: Sequence[str] = (),
) -> ReplicateSet:
    """Fit once per pseudo-SRS and draw R (or 1) synthetic replicates each.

    Replicate (m, r) uses the substream ``(seed, m, r)``.
    """
    variant = Variant.parse(variant)
    if variant is Variant.SYNREP_1:
        if R != 1:
            raise ValueError("synrep-1 draws exactly one replicate per pseudo-SRS")
    elif R < 2:
        raise ValueError("synrep-r needs R >= 2")
    if N is None:
        raise ValueError("population size N must be given")
    M = len(stage_output)
    n = np.asarray(stage_output[0]).shape[0]
    groups = None
    name = None
    for mi, data in enumerate(stage_output):
        data = np.asarray(data, dtype=float)
        if data.shape[0] != n:
            raise ValueError("every pseudo-SRS must have the same number of rows")
        model = fit(spec, data, columns)
        name = getattr(model, "name", "v1")
        for ri in range(R):
            out = np.asarray(model.generate(n, substream(seed, mi + 1, ri + 1)), dtype=float)
            if out.ndim == 1:
                out = out[:, None]
            if groups is None:
                groups = np.empty((M, R, n, out.shape[1]))
            groups[mi, ri] = out
    return ReplicateSet.from_groups(variant, groups, N, (name,) if groups.shape[-1] == 1 else ())
