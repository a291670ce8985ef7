"""Trial records, the principal-strata lattice and CSV ingestion."""
from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "Stratum",
    "StrataConfig",
    "ObservedUnit",
    "Dataset",
    "CsvSchema",
    "Diagnostic",
    "DataError",
    "compatible_strata",
    "load_csv",
    "write_csv",
    "validate_consistency",
]


class DataError(ValueError):
    """Raised for malformed input data or data/config contradictions."""


class Stratum(enum.Enum):
    """Principal stratum coded by the pair (D(0), D(1))."""

    NEVER_TAKER = (0, 0)
    COMPLIER = (0, 1)
    ALWAYS_TAKER = (1, 1)
    DEFIER = (1, 0)

    def d_at(self, z: int) -> int:
        """Treatment received by a member of this stratum when assigned ``z``."""
        return self.value[z]

    @property
    def short(self) -> str:
        return _SHORT[self]

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str | "Stratum") -> "Stratum":
        if isinstance(name, Stratum):
            return name
        key = str(name).strip().lower().replace("-", "_")
        for s in cls:
            if key in (s.label, s.short, s.label.replace("_", "")):
                return s
        raise ValueError(f"unknown stratum {name!r}; expected one of "
                         f"{[s.label for s in cls]}")


_SHORT = {
    Stratum.NEVER_TAKER: "n",
    Stratum.COMPLIER: "c",
    Stratum.ALWAYS_TAKER: "a",
    Stratum.DEFIER: "d",
}

# Composition of the observed (Z, D) cells before any assumption.
_CELL_STRATA = {
    (0, 0): (Stratum.NEVER_TAKER, Stratum.COMPLIER),
    (0, 1): (Stratum.ALWAYS_TAKER, Stratum.DEFIER),
    (1, 0): (Stratum.NEVER_TAKER, Stratum.DEFIER),
    (1, 1): (Stratum.ALWAYS_TAKER, Stratum.COMPLIER),
}

_CANONICAL_ORDER = (Stratum.NEVER_TAKER, Stratum.COMPLIER,
                    Stratum.ALWAYS_TAKER, Stratum.DEFIER)


@dataclass(frozen=True)
class StrataConfig:
    """Which strata exist and whether the exclusion restriction ties outcome laws.

    Monotonicity is encoded by the absence of defiers from ``active_strata``;
    the exclusion restriction is applied later when outcome parameter groups
    are built.
    """

    active_strata: tuple[Stratum, ...]
    reference_stratum: Stratum = Stratum.NEVER_TAKER
    exclusion_restriction: bool = True
    monotonicity: bool = True

    def __post_init__(self):
        active = tuple(Stratum.parse(s) for s in self.active_strata)
        object.__setattr__(self, "active_strata", active)
        object.__setattr__(self, "reference_stratum",
                           Stratum.parse(self.reference_stratum))
        if len(set(active)) != len(active):
            raise ValueError("duplicate strata in active_strata")
        if len(active) < 2:
            raise ValueError("at least two active strata are required")
        if self.monotonicity and Stratum.DEFIER in active:
            raise ValueError("monotonicity excludes defiers from the active strata")
        if self.reference_stratum not in active:
            raise ValueError(f"reference stratum {self.reference_stratum.label} "
                             "is not active")

    @classmethod
    def default(cls, exclusion_restriction: bool = True, monotonicity: bool = True,
                reference: Stratum | str = Stratum.NEVER_TAKER) -> "StrataConfig":
        strata = _CANONICAL_ORDER if not monotonicity else _CANONICAL_ORDER[:3]
        return cls(strata, Stratum.parse(reference), exclusion_restriction, monotonicity)

    def index(self, s: Stratum) -> int:
        return self.active_strata.index(s)

    def to_dict(self) -> dict:
        return {
            "active_strata": [s.label for s in self.active_strata],
            "reference_stratum": self.reference_stratum.label,
            "exclusion_restriction": self.exclusion_restriction,
            "monotonicity": self.monotonicity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StrataConfig":
        mono = bool(d.get("monotonicity", True))
        er = bool(d.get("exclusion_restriction", True))
        ref = d.get("reference_stratum", "never_taker")
        if d.get("active_strata") is None:
            return cls.default(er, mono, ref)
        return cls(tuple(Stratum.parse(s) for s in d["active_strata"]),
                   Stratum.parse(ref), er, mono)


def compatible_strata(z: int, d: int, config: StrataConfig) -> tuple[Stratum, ...]:
    """Active strata that could produce the observed cell ``(z, d)``.

    Ordering follows ``config.active_strata``. An empty tuple means the cell
    contradicts the configuration.
    """
    if z not in (0, 1) or d not in (0, 1):
        raise ValueError(f"z and d must be 0/1, got z={z!r}, d={d!r}")
    cell = _CELL_STRATA[(int(z), int(d))]
    return tuple(s for s in config.active_strata if s in cell)


@dataclass(frozen=True)
class ObservedUnit:
    id: str
    x: np.ndarray
    z: int
    d: int
    y: float
    delta: int  # 1 = censored

    def __post_init__(self):
        if not (math.isfinite(self.y) and self.y >= 0):
            raise DataError(f"unit {self.id}: observed time must be finite and >= 0")
        for name in ("z", "d", "delta"):
            if getattr(self, name) not in (0, 1):
                raise DataError(f"unit {self.id}: {name} must be 0 or 1")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Column-oriented trial data.

    ``delta`` follows the censoring convention delta = 1{T >= C}: a value of 1
    marks a censored record. Covariates in ``x`` are on the (possibly)
    standardized scale; ``standardization`` maps covariate name to the
    ``(mean, sd)`` used, with ``(0, 1)`` for untouched columns.
    """

    ids: tuple[str, ...]
    x: np.ndarray
    z: np.ndarray
    d: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    covariate_names: tuple[str, ...] = ()
    standardization: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ids)
        x = np.asarray(self.x, dtype=float).reshape(n, len(self.covariate_names))
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "x", _frozen(x))
        for name in ("z", "d", "delta"):
            arr = np.asarray(getattr(self, name)).astype(np.int8).reshape(n)
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise DataError(f"{name} must be binary")
            object.__setattr__(self, name, _frozen(arr))
        y = np.asarray(self.y, dtype=float).reshape(n)
        if not np.all(np.isfinite(y)) or np.any(y < 0):
            raise DataError("observed times must be finite and nonnegative")
        object.__setattr__(self, "y", _frozen(y))
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise DataError("duplicate covariate names")
        if len(set(self.ids)) != n:
            raise DataError("duplicate unit ids")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    def __len__(self) -> int:
        return self.n

    def unit(self, i: int) -> ObservedUnit:
        return ObservedUnit(self.ids[i], self.x[i], int(self.z[i]), int(self.d[i]),
                            float(self.y[i]), int(self.delta[i]))

    @property
    def units(self) -> list[ObservedUnit]:
        return list(self)

    def __iter__(self) -> Iterator[ObservedUnit]:
        for i in range(self.n):
            yield self.unit(i)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(tuple(np.asarray(self.ids, dtype=object)[index]), self.x[index],
                       self.z[index], self.d[index], self.y[index], self.delta[index],
                       self.covariate_names, dict(self.standardization))

    def raw_x(self) -> np.ndarray:
        """Covariates mapped back to their original scale."""
        if not self.p:
            return self.x.copy()
        mean = np.array([self.standardization.get(c, (0.0, 1.0))[0]
                         for c in self.covariate_names])
        sd = np.array([self.standardization.get(c, (0.0, 1.0))[1]
                       for c in self.covariate_names])
        return self.x * sd + mean

    @classmethod
    def from_units(cls, units: Sequence[ObservedUnit],
                   covariate_names: Sequence[str] = ()) -> "Dataset":
        p = len(covariate_names)
        x = np.array([np.asarray(u.x, dtype=float).reshape(p) for u in units]).reshape(len(units), p)
        return cls(tuple(u.id for u in units), x,
                   [u.z for u in units], [u.d for u in units],
                   [u.y for u in units], [u.delta for u in units],
                   tuple(covariate_names), {})


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for CSV ingestion.

    ``status_role`` states what a 1 in the status column means: ``"event"``
    (1 = failure observed, the common software convention) or ``"censored"``
    (1 = censored). Internally everything is converted to censored = 1.
    """

    time: str = "time"
    status: str = "censored"
    status_role: str = "censored"
    assignment: str = "z"
    received: str = "d"
    covariates: tuple[str, ...] = ()
    id: str | None = "id"

    def __post_init__(self):
        if self.status_role not in ("event", "censored"):
            raise ValueError("status_role must be 'event' or 'censored'")
        object.__setattr__(self, "covariates", tuple(self.covariates or ()))

    def to_dict(self) -> dict:
        return {"time": self.time, "status": self.status, "status_role": self.status_role,
                "assignment": self.assignment, "received": self.received,
                "covariates": list(self.covariates), "id": self.id}

    @classmethod
    def from_dict(cls, d: dict | None) -> "CsvSchema":
        d = dict(d or {})
        if "covariates" in d:
            d["covariates"] = tuple(d["covariates"] or ())
        return cls(**d)


def _parse_binary(text: str, column: str, row: int) -> int:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"row {row}: column {column!r} value {text!r} is not a number") from None
    if v not in (0.0, 1.0):
        raise DataError(f"row {row}: column {column!r} must be 0 or 1, got {text!r}")
    return int(v)


def _parse_real(text: str, column: str, row: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"row {row}: column {column!r} value {text!r} is not a number") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}: column {column!r} is not finite")
    return v


def load_csv(path: str | Path, schema: CsvSchema | None = None,
             standardize: bool = True) -> Dataset:
    """Read and validate a trial CSV.

    Rows are numbered from 1 for the first data line. Columns not named by
    ``schema`` are dropped with a warning. When ``standardize`` is set,
    covariates with more than two distinct values are centered and scaled by
    their sample standard deviation; two-valued columns are left as is.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        required = [schema.time, schema.status, schema.assignment, schema.received,
                    *schema.covariates]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        use_id = schema.id is not None and schema.id in header
        known = set(required) | ({schema.id} if use_id else set())
        extra = [h for h in header if h not in known]
        if extra:
            warnings.warn(f"{path}: ignoring unused column(s) {extra}", stacklevel=2)
        col = {h: k for k, h in enumerate(header)}

        ids, xs, zs, ds, ys, deltas = [], [], [], [], [], []
        for row, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"row {row}: expected {len(header)} fields, got {len(rec)}")
            y = _parse_real(rec[col[schema.time]], schema.time, row)
            if y < 0:
                raise DataError(f"row {row}: negative time {y}")
            status = _parse_binary(rec[col[schema.status]], schema.status, row)
            delta = status if schema.status_role == "censored" else 1 - status
            if delta == 0 and y == 0:
                raise DataError(f"row {row}: event at time 0 (events need a positive time)")
            zs.append(_parse_binary(rec[col[schema.assignment]], schema.assignment, row))
            ds.append(_parse_binary(rec[col[schema.received]], schema.received, row))
            xs.append([_parse_real(rec[col[c]], c, row) for c in schema.covariates])
            ys.append(y)
            deltas.append(delta)
            ids.append(rec[col[schema.id]].strip() if use_id else str(row))

    p = len(schema.covariates)
    x = np.array(xs, dtype=float).reshape(len(ys), p)
    transform = {c: (0.0, 1.0) for c in schema.covariates}
    if standardize and len(ys) > 1:
        for j, c in enumerate(schema.covariates):
            values = np.unique(x[:, j])
            if values.size <= 2:
                continue
            mean = float(np.mean(x[:, j]))
            sd = float(np.std(x[:, j], ddof=1))
            x[:, j] = (x[:, j] - mean) / sd
            transform[c] = (mean, sd)
    return Dataset(tuple(ids), x, zs, ds, ys, deltas, schema.covariates, transform)


def write_csv(data: Dataset, path: str | Path, header_lines: Sequence[str] = (),
              status_role: str = "censored") -> Path:
    """Write ``data`` with covariates on their original scale.

    Reals are written with ``repr`` so a reload is exact up to the
    standardization round trip. ``header_lines`` are emitted as leading
    ``#`` comments.
    """
    path = Path(path)
    raw = data.raw_x()
    status_col = "censored" if status_role == "censored" else "event"
    with path.open("w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", status_col, "z", "d", *data.covariate_names])
        for i in range(data.n):
            status = int(data.delta[i]) if status_role == "censored" else 1 - int(data.delta[i])
            w.writerow([data.ids[i], repr(float(data.y[i])), status, int(data.z[i]),
                        int(data.d[i]), *(repr(float(v)) for v in raw[i])])
    return path


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" | "warning"
    code: str
    message: str

    def __str__(self) -> str:
        return f"[{self.level}] {self.code}: {self.message}"


def validate_consistency(data: Dataset, config: StrataConfig) -> list[Diagnostic]:
    """Check that every observed cell can be explained by the active strata."""
    out: list[Diagnostic] = []
    counts = {}
    for z in (0, 1):
        for d in (0, 1):
            counts[(z, d)] = int(np.sum((data.z == z) & (data.d == d)))
    for (z, d), k in counts.items():
        if k and not compatible_strata(z, d, config):
            first = int(np.flatnonzero((data.z == z) & (data.d == d))[0])
            out.append(Diagnostic(
                "error", "cell_contradiction",
                f"{k} unit(s) in cell (Z={z}, D={d}) (first: id {data.ids[first]}) "
                f"but no active stratum among "
                f"{[s.label for s in config.active_strata]} is compatible"))
    for z in (0, 1):
        if counts[(z, 0)] + counts[(z, 1)] == 0:
            out.append(Diagnostic("warning", "arm_empty", f"arm empty: no units with Z={z}"))
    if data.n:
        for s in config.active_strata:
            support = sum(counts[(z, s.d_at(z))] for z in (0, 1))
            if support == 0:
                out.append(Diagnostic(
                    "warning", "stratum_unsupported",
                    f"no observed cell is compatible with stratum {s.label}"))
    return out
