"""Combining rules for synthetic replicates and the pseudo-data reference procedures."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import stats

from .core import CombinedEstimate, PointVariance, ReplicateSet, StructureError, Variant, resolve_column

__all__ = [
    "EstimandSpec",
    "ReplicateStatistics",
    "ZeroWidthWarning",
    "t_quantile",
    "interval",
    "estimand_on_srs",
    "combine_synrep_r",
    "combine_synrep_1",
    "combine_pseudo_pop",
    "combine_pseudo_srs",
    "combine_release",
]


class ZeroWidthWarning(UserWarning):
    """Final variance is exactly zero; the interval collapses to the point."""


@dataclass(frozen=True)
class EstimandSpec:
    kind: str = "mean"
    column: "int | str" = 0

    def __post_init__(self):
        if self.kind != "mean":
            raise ValueError(f"unsupported estimand {self.kind!r}")


def t_quantile(prob: float, df: float) -> float:
    return float(stats.t.ppf(prob, df))


def interval(point: float, variance: float, df: float, level: float = 0.95) -> tuple[float, float]:
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    half = t_quantile(0.5 + level / 2, df) * math.sqrt(variance)
    return point - half, point + half


def estimand_on_srs(data: np.ndarray, spec: EstimandSpec, N: int, columns=()) -> PointVariance:
    """Mean of one column with the finite-population-corrected SRS variance."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    n = data.shape[0]
    if n < 2:
        raise ValueError("need at least 2 rows")
    j = resolve_column(columns or tuple(f"v{k + 1}" for k in range(data.shape[1])), spec.column)
    y = data[:, j]
    mean = math.fsum(y) / n
    s2 = math.fsum((y - mean) ** 2) / (n - 1)
    return PointVariance(mean, (1.0 - n / N) * s2 / n)


def _mean(x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    return math.fsum(x) / x.size


def _var(x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    mu = _mean(x)
    return math.fsum((x - mu) ** 2) / (x.size - 1)


class ReplicateStatistics:
    """Per-(m, r) estimates and the derived between/within quantities.

    ``q`` and ``v`` have shape ``(M, R)``; R = 1 covers SynRep-1, where the
    same formulas reduce to the single-replicate versions.
    """

    def __init__(self, q, v):
        q = np.array(q, dtype=float, ndmin=2)
        v = np.array(v, dtype=float, ndmin=2)
        if q.ndim != 2 or q.shape != v.shape:
            raise StructureError("q and v must share an (M, R) shape")
        if q.shape[0] < 2:
            raise StructureError("M >= 2 required")
        if np.any(v < 0) or not np.all(np.isfinite(q)) or not np.all(np.isfinite(v)):
            raise StructureError("estimates must be finite with nonnegative variances")
        q.flags.writeable = False
        v.flags.writeable = False
        self.q, self.v = q, v

    @classmethod
    def from_release(cls, rset: ReplicateSet, spec: EstimandSpec = EstimandSpec()) -> "ReplicateStatistics":
        j = resolve_column(rset.columns, spec.column)
        groups = rset.grouped(j)
        n, N = rset.n, rset.N
        q = np.array([[math.fsum(g) / n for g in row] for row in groups])
        s2 = np.array([[math.fsum((g - qq) ** 2) / (n - 1) for g, qq in zip(row, qrow)] for row, qrow in zip(groups, q)])
        return cls(q, (1.0 - n / N) * s2 / n)

    @property
    def M(self) -> int:
        return self.q.shape[0]

    @property
    def R(self) -> int:
        return self.q.shape[1]

    def subset(self, M: int, R: int) -> "ReplicateStatistics":
        if not (2 <= M <= self.M and 1 <= R <= self.R):
            raise StructureError(f"cannot take ({M}, {R}) from ({self.M}, {self.R})")
        return ReplicateStatistics(self.q[:M, :R], self.v[:M, :R])

    @cached_property
    def q_bar_m(self) -> np.ndarray:
        return np.array([_mean(row) for row in self.q])

    @cached_property
    def q_bar(self) -> float:
        return _mean(self.q)

    @cached_property
    def b(self) -> float:
        return _var(self.q_bar_m)

    @cached_property
    def w_m(self) -> np.ndarray:
        if self.R < 2:
            return np.zeros(self.M)
        return np.array([_var(row) for row in self.q])

    @cached_property
    def w_bar(self) -> float:
        return _mean(self.w_m)

    @cached_property
    def v_bar(self) -> float:
        return _mean(self.v)


def _finish(point, raw, fallback, df, level, method, M, R) -> CombinedEstimate:
    adjusted = raw <= 0 and fallback is not None
    variance = fallback if adjusted else raw
    if variance == 0:
        warnings.warn(f"{method}: variance is exactly zero; zero-width interval", ZeroWidthWarning, stacklevel=3)
    low, high = interval(point, variance, df, level)
    return CombinedEstimate(point, variance, raw, adjusted, df, low, high, level, method, M, R)


def combine_synrep_r(stats_: ReplicateStatistics, level: float = 0.95) -> CombinedEstimate:
    """``T_r = (1 + 1/M) b - v_bar - w_bar / R``.

    When ``T_r <= 0`` the variance falls back to ``(1 + 2/M) v_bar + w_bar / (M R)``.
    """
    M, R = stats_.M, stats_.R
    if R < 2:
        raise StructureError("synrep-r combining needs R >= 2")
    raw = (1 + 1 / M) * stats_.b - stats_.v_bar - stats_.w_bar / R
    fallback = (1 + 2 / M) * stats_.v_bar + stats_.w_bar / (M * R)
    return _finish(stats_.q_bar, raw, fallback, M - 1, level, Variant.SYNREP_R.value, M, R)


def combine_synrep_1(stats_: ReplicateStatistics, level: float = 0.95) -> CombinedEstimate:
    """``T_m = (1 + 1/M) b - 2 v_bar``, falling back to ``(1 + 3/M) v_bar``."""
    M = stats_.M
    if stats_.R != 1:
        raise StructureError("synrep-1 combining needs R = 1")
    raw = (1 + 1 / M) * stats_.b - 2 * stats_.v_bar
    fallback = (1 + 3 / M) * stats_.v_bar
    return _finish(stats_.q_bar, raw, fallback, M - 1, level, Variant.SYNREP_1.value, M, 1)


def combine_pseudo_pop(pop_means, level: float = 0.95) -> CombinedEstimate:
    """Mean of the pseudo-population values with variance ``(1 + 1/M) B``."""
    Q = np.asarray(pop_means, dtype=float)
    M = Q.size
    if M < 2:
        raise StructureError("M >= 2 required")
    raw = (1 + 1 / M) * _var(Q)
    return _finish(_mean(Q), raw, None, M - 1, level, "pseudo-pop", M, 0)


def combine_pseudo_srs(q, v, level: float = 0.95) -> CombinedEstimate:
    """``(1 + 1/M) b - v_bar`` from the pseudo-SRS estimates.

    A nonpositive value falls back to ``(1 + 2/M) v_bar``.
    """
    st = ReplicateStatistics(np.asarray(q, dtype=float)[:, None], np.asarray(v, dtype=float)[:, None])
    M = st.M
    raw = (1 + 1 / M) * st.b - st.v_bar
    fallback = (1 + 2 / M) * st.v_bar
    return _finish(st.q_bar, raw, fallback, M - 1, level, "pseudo-srs", M, 0)


def combine_release(rset: ReplicateSet, spec: EstimandSpec = EstimandSpec(), level: float = 0.95) -> CombinedEstimate:
    """Dispatch on the release's variant metadata."""
    st = ReplicateStatistics.from_release(rset, spec)
    if rset.variant is Variant.SYNREP_R:
        return combine_synrep_r(st, level)
    return combine_synrep_1(st, level)
