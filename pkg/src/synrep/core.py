"""Domain types, validation and file I/O shared across the package.

Every type validates itself on construction and stores its arrays read-only,
so instances can be passed freely between threads and worker processes.
"""
from __future__ import annotations

import csv
import enum
import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SynRepError",
    "SchemaError",
    "ParseError",
    "StructureError",
    "VariantError",
    "Variant",
    "UnitRecord",
    "WeightedSample",
    "ReplicateSet",
    "PointVariance",
    "CombinedEstimate",
    "substream",
    "child_seed",
    "read_sample",
    "write_sample",
    "read_replicates",
    "write_replicates",
]

REPLICATE_MAGIC = "# synrep-replicates "
_FLOAT_FMT = ".17g"


class SynRepError(Exception):
    """Base class; ``code`` is the machine-readable tag the CLI prints."""

    code = "E_SYNREP"


class SchemaError(SynRepError, ValueError):
    code = "E_SCHEMA"


class ParseError(SynRepError, ValueError):
    code = "E_PARSE"


class StructureError(SynRepError, ValueError):
    code = "E_STRUCTURE"


class VariantError(StructureError):
    code = "E_VARIANT"


class Variant(str, enum.Enum):
    SYNREP_R = "synrep-r"
    SYNREP_1 = "synrep-1"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"synrepr": "synrep-r", "synrep1": "synrep-1"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise VariantError(f"unknown variant {value!r}") from None


# ---------------------------------------------------------------------------
# random substreams


def _key_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("substream keys must be nonnegative")
        return int(part)
    return zlib.crc32(str(part).encode("utf8"))


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(2**63)))
    if seed is None:
        raise ValueError("an explicit seed is required")
    return np.random.SeedSequence(int(seed))


def child_seed(seed, *key) -> np.random.SeedSequence:
    root = _seed_sequence(seed)
    spawn_key = tuple(root.spawn_key) + tuple(_key_int(k) for k in key)
    return np.random.SeedSequence(root.entropy, spawn_key=spawn_key)


def substream(seed, *key) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *key)``.

    The same seed and key always give the same stream, regardless of the
    order in which streams are requested. String key parts are hashed.
    A ``Generator`` seed is consumed once to derive a root sequence.
    """
    return np.random.default_rng(child_seed(seed, *key))


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(_seed_sequence(seed))


def _frozen(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# parent sample


@dataclass(frozen=True)
class UnitRecord:
    weight: float
    values: tuple[float, ...]

    def __post_init__(self):
        w = float(self.weight)
        if not (math.isfinite(w) and w > 0):
            raise SchemaError(f"weight must be positive and finite, got {self.weight!r}")
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise SchemaError("a record needs at least one survey value")
        if not all(math.isfinite(v) for v in vals):
            raise SchemaError("survey values must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class WeightedSample:
    """The confidential parent sample: design weights and survey values.

    ``values`` has shape ``(n, p)``. ``population_size`` is N.
    """

    weights: np.ndarray
    values: np.ndarray
    population_size: int
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if weights.ndim != 1 or values.ndim != 2 or values.shape[0] != weights.shape[0]:
            raise SchemaError("weights must be (n,) and values (n, p) with matching n")
        n, p = values.shape
        if p < 1:
            raise SchemaError("at least one survey variable is required")
        if n < 2:
            raise SchemaError(f"n >= 2 required, got n={n}")
        bad = np.flatnonzero(~(np.isfinite(weights) & (weights > 0)))
        if bad.size:
            raise SchemaError(f"row {bad[0] + 1}: weight must be positive and finite")
        bad = np.flatnonzero(~np.isfinite(values).all(axis=1))
        if bad.size:
            raise SchemaError(f"row {bad[0] + 1}: survey values must be finite")
        N = int(self.population_size)
        if N != self.population_size or N <= n:
            raise SchemaError(f"population size must be an integer N > n (n={n}, N={self.population_size})")
        columns = tuple(self.columns) or tuple(f"v{j + 1}" for j in range(p))
        if len(columns) != p or len(set(columns)) != p:
            raise SchemaError("column names must be unique and match the value width")
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "population_size", N)
        object.__setattr__(self, "columns", columns)

    @classmethod
    def from_records(cls, records: Iterable[UnitRecord], population_size: int, columns: Sequence[str] = ()):
        records = list(records)
        if len(records) < 2:
            raise SchemaError(f"n >= 2 required, got n={len(records)}")
        widths = {len(r.values) for r in records}
        if len(widths) != 1:
            raise SchemaError("all records must have the same number of values")
        return cls(
            np.array([r.weight for r in records]),
            np.array([r.values for r in records]),
            population_size,
            tuple(columns),
        )

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def records(self) -> list[UnitRecord]:
        return [UnitRecord(w, tuple(v)) for w, v in zip(self.weights, self.values)]

    def column_index(self, column: "int | str") -> int:
        return resolve_column(self.columns, column)

    def column(self, column: "int | str" = 0) -> np.ndarray:
        return self.values[:, self.column_index(column)]


def resolve_column(columns: Sequence[str], column: "int | str") -> int:
    if isinstance(column, (int, np.integer)):
        j = int(column)
        if not 0 <= j < len(columns):
            raise SchemaError(f"column index {j} out of range for {len(columns)} columns")
        return j
    try:
        return list(columns).index(column)
    except ValueError:
        raise SchemaError(f"column {column!r} not found; available: {', '.join(columns)}") from None


# ---------------------------------------------------------------------------
# released replicates


@dataclass(frozen=True, eq=False)
class ReplicateSet:
    """Released synthetic data: ``M * R`` groups of ``n`` rows tagged (m, r).

    Indices are 1-based as in the released file.
    """

    variant: Variant
    M: int
    R: int
    n: int
    N: int
    m: np.ndarray
    r: np.ndarray
    values: np.ndarray
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        variant = Variant.parse(self.variant)
        M, R, n, N = (int(x) for x in (self.M, self.R, self.n, self.N))
        m = np.asarray(self.m)
        r = np.asarray(self.r)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if M < 2:
            raise StructureError(f"M >= 2 required, got {M}")
        if variant is Variant.SYNREP_1 and R != 1:
            raise VariantError(f"synrep-1 releases require R = 1, got R={R}")
        if variant is Variant.SYNREP_R and R < 2:
            raise VariantError(f"synrep-r releases require R >= 2, got R={R}")
        if n < 2 or N < n:
            raise StructureError(f"invalid sizes n={n}, N={N}")
        rows = values.shape[0]
        if m.shape != (rows,) or r.shape != (rows,):
            raise StructureError("m and r index vectors must have one entry per row")
        if not (np.issubdtype(m.dtype, np.integer) and np.issubdtype(r.dtype, np.integer)):
            raise StructureError("m and r indices must be integers")
        if variant is Variant.SYNREP_1 and rows and r.max() > 1:
            raise VariantError("synrep-1 release contains r > 1")
        if rows and (m.min() < 1 or m.max() > M or r.min() < 1 or r.max() > R):
            raise StructureError("(m, r) index outside 1..M x 1..R")
        if rows != M * R * n:
            raise StructureError(f"expected M*R*n = {M * R * n} rows, found {rows}")
        counts = np.bincount((m - 1) * R + (r - 1), minlength=M * R)
        short = np.flatnonzero(counts != n)
        if short.size:
            g = short[0]
            raise StructureError(
                f"group (m={g // R + 1}, r={g % R + 1}) has {counts[g]} rows, expected n={n}"
            )
        columns = tuple(self.columns) or tuple(f"v{j + 1}" for j in range(values.shape[1]))
        if len(columns) != values.shape[1]:
            raise StructureError("column names do not match value width")
        object.__setattr__(self, "variant", variant)
        for name, val in (("M", M), ("R", R), ("n", n), ("N", N)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "m", _frozen(m, dtype=np.int64))
        object.__setattr__(self, "r", _frozen(r, dtype=np.int64))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "columns", columns)

    @classmethod
    def from_groups(cls, variant, groups: np.ndarray, N: int, columns: Sequence[str] = ()):
        """Build from an array of shape ``(M, R, n, p)`` or ``(M, R, n)``."""
        groups = np.asarray(groups, dtype=float)
        if groups.ndim == 3:
            groups = groups[..., None]
        M, R, n, p = groups.shape
        m = np.repeat(np.arange(1, M + 1), R * n)
        r = np.tile(np.repeat(np.arange(1, R + 1), n), M)
        return cls(variant, M, R, n, N, m, r, groups.reshape(M * R * n, p), tuple(columns))

    @property
    def metadata(self) -> dict:
        return {
            "variant": self.variant.value,
            "M": self.M,
            "R": self.R,
            "n": self.n,
            "N": self.N,
            "columns": list(self.columns),
        }

    def grouped(self, column: "int | str" = 0) -> np.ndarray:
        """Values of one column as an ``(M, R, n)`` array."""
        j = resolve_column(self.columns, column)
        order = np.lexsort((self.r, self.m))
        return self.values[order, j].reshape(self.M, self.R, self.n)

    def __eq__(self, other):
        if not isinstance(other, ReplicateSet):
            return NotImplemented
        return (
            self.metadata == other.metadata
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# estimates


@dataclass(frozen=True)
class PointVariance:
    estimate: float
    variance: float

    def __post_init__(self):
        if not (self.variance >= 0):
            raise ValueError(f"variance must be nonnegative, got {self.variance}")


@dataclass(frozen=True)
class CombinedEstimate:
    """Point estimate, variance and t-interval from a combining rule.

    ``raw_variance`` is the method-of-moments value before the
    negative-variance substitution; ``adjusted`` records whether the
    substitution fired.
    """

    point: float
    variance: float
    raw_variance: float
    adjusted: bool
    df: float
    ci_low: float
    ci_high: float
    level: float
    method: str = ""
    M: int = 0
    R: int = 0

    def __post_init__(self):
        if not (0 < self.level < 1):
            raise ValueError("level must lie in (0, 1)")
        if not (self.df > 0):
            raise ValueError("df must be positive")
        if not (self.variance >= 0):
            raise ValueError("final variance must be nonnegative")
        if self.raw_variance < 0 and not self.adjusted:
            raise ValueError("a negative raw variance must be adjusted")
        if self.adjusted and self.raw_variance > 0:
            raise ValueError("adjustment fired on a positive raw variance")
        if not self.adjusted and self.variance != self.raw_variance:
            raise ValueError("unadjusted variance must equal the raw variance")
        if not (self.ci_low <= self.point <= self.ci_high):
            raise ValueError("interval does not contain the point estimate")

    @property
    def ci(self) -> tuple[float, float]:
        return (self.ci_low, self.ci_high)

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict:
        return {
            "variant": self.method,
            "M": self.M,
            "R": self.R,
            "point": self.point,
            "raw_variance": self.raw_variance,
            "variance": self.variance,
            "adjusted": self.adjusted,
            "df": self.df,
            "ci": [self.ci_low, self.ci_high],
            "level": self.level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CombinedEstimate":
        low, high = d["ci"]
        return cls(
            point=d["point"],
            variance=d["variance"],
            raw_variance=d["raw_variance"],
            adjusted=bool(d["adjusted"]),
            df=d["df"],
            ci_low=low,
            ci_high=high,
            level=d["level"],
            method=d.get("variant", ""),
            M=int(d.get("M", 0)),
            R=int(d.get("R", 0)),
        )


# ---------------------------------------------------------------------------
# file I/O


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def read_sample(
    path,
    weight_column: str = "weight",
    population_size: "int | None" = None,
    columns: "Sequence[str] | None" = None,
) -> WeightedSample:
    """Read a parent sample from CSV.

    N comes from ``population_size`` or, failing that, from a sidecar
    ``<stem>.meta.json`` holding ``{"population_size": N}``. Row numbers in
    error messages count data rows from 1.
    """
    path = Path(path)
    if population_size is None:
        side = _sidecar(path)
        if not side.exists():
            raise SchemaError(f"population size not given and no sidecar {side.name} found")
        try:
            population_size = int(json.loads(side.read_text())["population_size"])
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"sidecar {side.name} lacks a valid population_size") from exc

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file: header row required") from None
        if weight_column not in header:
            raise SchemaError(f"weight column {weight_column!r} missing from header")
        wj = header.index(weight_column)
        value_names = [h for h in header if h != weight_column]
        if columns is not None:
            missing = [c for c in columns if c not in value_names]
            if missing:
                raise SchemaError(f"value columns not found: {', '.join(missing)}")
            value_names = list(columns)
        if not value_names:
            raise SchemaError("at least one value column is required")
        vj = [header.index(c) for c in value_names]

        weights, values = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"row {row_no}: expected {len(header)} fields, found {len(row)}")
            raw_w = row[wj].strip()
            if not raw_w:
                raise SchemaError(f"row {row_no}: missing weight")
            try:
                w = float(raw_w)
            except ValueError:
                raise ParseError(f"row {row_no}: weight {raw_w!r} is not numeric") from None
            if not (math.isfinite(w) and w > 0):
                raise SchemaError(f"row {row_no}: weight must be positive, got {raw_w}")
            vals = []
            for j, name in zip(vj, value_names):
                cell = row[j].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"row {row_no}: column {name!r} value {cell!r} is not numeric") from None
                if not math.isfinite(v):
                    raise SchemaError(f"row {row_no}: column {name!r} is not finite")
                vals.append(v)
            weights.append(w)
            values.append(vals)

    if len(weights) < 2:
        raise SchemaError(f"n >= 2 required, got n={len(weights)}")
    return WeightedSample(
        np.array(weights), np.array(values).reshape(len(weights), len(value_names)), population_size, tuple(value_names)
    )


def write_sample(sample: WeightedSample, path, weight_column: str = "weight", sidecar: bool = True) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([weight_column, *sample.columns])
        for wt, vals in zip(sample.weights, sample.values):
            w.writerow([format(wt, _FLOAT_FMT), *(format(v, _FLOAT_FMT) for v in vals)])
    if sidecar:
        _sidecar(path).write_text(json.dumps({"population_size": sample.population_size}) + "\n")


def write_replicates(rset: ReplicateSet, path) -> None:
    """Write a release as one CSV: a metadata comment line, header, rows."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(REPLICATE_MAGIC + json.dumps(rset.metadata, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "r", *rset.columns])
        for mi, ri, vals in zip(rset.m.tolist(), rset.r.tolist(), rset.values):
            w.writerow([mi, ri, *(format(v, _FLOAT_FMT) for v in vals)])


def read_replicates(path) -> ReplicateSet:
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline()
        if not first.startswith(REPLICATE_MAGIC):
            raise StructureError("missing synrep-replicates metadata line")
        try:
            meta = json.loads(first[len(REPLICATE_MAGIC):])
        except json.JSONDecodeError as exc:
            raise StructureError(f"metadata line is not valid JSON: {exc}") from None
        missing = {"variant", "M", "R", "n", "N"} - set(meta)
        if missing:
            raise StructureError(f"metadata lacks {', '.join(sorted(missing))}")
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StructureError("missing column header") from None
        if header[:2] != ["m", "r"] or len(header) < 3:
            raise StructureError("header must start with m,r followed by variable columns")
        columns = tuple(header[2:])
        if "columns" in meta and list(meta["columns"]) != list(columns):
            raise StructureError("header columns disagree with metadata")
        ms, rs, vals = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise StructureError(f"row {row_no}: expected {len(header)} fields, found {len(row)}")
            try:
                ms.append(int(row[0]))
                rs.append(int(row[1]))
                vals.append([float(x) for x in row[2:]])
            except ValueError:
                raise ParseError(f"row {row_no}: malformed numeric field") from None
    values = np.array(vals, dtype=float).reshape(len(vals), len(columns))
    return ReplicateSet(
        Variant.parse(meta["variant"]),
        meta["M"],
        meta["R"],
        meta["n"],
        meta["N"],
        np.array(ms, dtype=np.int64),
        np.array(rs, dtype=np.int64),
        values,
        columns,
    )
