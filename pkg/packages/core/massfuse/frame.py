"""Frame: the data model every estimator reads.

A Frame is columnar: ids, covariates, outcomes and the optional Sample B flag
and stratum label live in read-only numpy arrays. ``Frame.records`` gives the
row view (UnitRecord) when one is needed. ProbabilitySample and BigSample wrap
a Frame with what each sample knows about its own selection.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from massfuse.errors import EmptyFrameError, ParseError, SchemaError

if TYPE_CHECKING:
    from massfuse.designs import DesignDescriptor

log = logging.getLogger(__name__)


class FrameSchema(BaseModel):
    """Column metadata for CSV ingestion."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    id_column: str | None = "id"  # None numbers rows 0..n-1
    covariates: list[str]
    outcomes: list[str] = Field(default_factory=list)
    binary_outcomes: list[str] = Field(default_factory=list)
    delta_b_column: str | None = None
    stratum_column: str | None = None
    pi_column: str | None = None

    @model_validator(mode="after")
    def _check_columns(self) -> FrameSchema:
        if not self.covariates:
            raise ValueError("schema needs at least one covariate column")
        names = self.columns()
        if len(set(names)) != len(names):
            raise ValueError(f"schema column names must be unique: {names}")
        unknown = set(self.binary_outcomes) - set(self.outcomes)
        if unknown:
            raise ValueError(f"binary outcomes {sorted(unknown)} are not declared outcomes")
        return self

    def columns(self) -> list[str]:
        optional = [self.delta_b_column, self.stratum_column, self.pi_column]
        leading = [self.id_column] if self.id_column else []
        return [*leading, *self.covariates, *self.outcomes, *[c for c in optional if c]]


@dataclass(frozen=True)
class UnitRecord:
    id: int
    x: tuple[float, ...]
    y: tuple[float, ...]
    delta_b: bool | None = None


def _frozen(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class Frame:
    """A finite-population (or sample) table with covariates X and outcomes Y."""

    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    covariate_names: tuple[str, ...]
    outcome_names: tuple[str, ...] = ()
    delta_b: np.ndarray | None = None
    strata: np.ndarray | None = None
    binary_outcomes: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        ids = np.array(self.ids, dtype=np.int64).reshape(-1)
        n = ids.shape[0]
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(n, -1)
        y = np.array(self.y, dtype=float)
        if y.size == 0:
            y = np.empty((n, len(self.outcome_names)))
        elif y.ndim == 1:
            y = y.reshape(n, -1)

        if x.shape != (n, len(self.covariate_names)):
            raise SchemaError(f"covariate matrix has shape {x.shape}, expected ({n}, {len(self.covariate_names)})")
        if y.shape != (n, len(self.outcome_names)):
            raise SchemaError(f"outcome matrix has shape {y.shape}, expected ({n}, {len(self.outcome_names)})")
        if np.any(ids < 0):
            raise SchemaError("unit ids must be non-negative")
        if np.unique(ids).size != n:
            raise SchemaError("unit ids must be unique within a frame")
        if not np.all(np.isfinite(x)):
            raise SchemaError("covariates must be fully observed")
        for name in self.binary_outcomes:
            if name not in self.outcome_names:
                raise SchemaError(f"binary outcome {name!r} is not an outcome column")
            col = y[:, self.outcome_names.index(name)]
            if not np.all((col == 0.0) | (col == 1.0)):
                raise SchemaError(f"binary outcome {name!r} must contain only 0 or 1")

        object.__setattr__(self, "ids", _frozen(ids))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "outcome_names", tuple(self.outcome_names))
        object.__setattr__(self, "binary_outcomes", frozenset(self.binary_outcomes))
        if self.delta_b is not None:
            flags = np.array(self.delta_b, dtype=bool).reshape(-1)
            if flags.shape[0] != n:
                raise SchemaError("delta_b flag column length differs from the frame")
            object.__setattr__(self, "delta_b", _frozen(flags))
        if self.strata is not None:
            labels = np.array(self.strata, dtype=np.int64).reshape(-1)
            if labels.shape[0] != n:
                raise SchemaError("stratum column length differs from the frame")
            object.__setattr__(self, "strata", _frozen(labels))

    @property
    def n_rows(self) -> int:
        return int(self.ids.shape[0])

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def q(self) -> int:
        return len(self.outcome_names)

    @property
    def records(self) -> list[UnitRecord]:
        flags = self.delta_b
        return [
            UnitRecord(
                id=int(self.ids[i]),
                x=tuple(float(v) for v in self.x[i]),
                y=tuple(float(v) for v in self.y[i]),
                delta_b=None if flags is None else bool(flags[i]),
            )
            for i in range(self.n_rows)
        ]

    def covariate_index(self, name: str) -> int:
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate {name!r}; frame has {list(self.covariate_names)}") from None

    def outcome_index(self, name: str) -> int:
        try:
            return self.outcome_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown outcome {name!r}; frame has {list(self.outcome_names)}") from None

    def take(self, rows: np.ndarray) -> Frame:
        """Return the sub-frame with the given row positions, in that order."""
        rows = np.asarray(rows, dtype=np.intp)
        return Frame(
            ids=self.ids[rows],
            x=self.x[rows],
            y=self.y[rows],
            covariate_names=self.covariate_names,
            outcome_names=self.outcome_names,
            delta_b=None if self.delta_b is None else self.delta_b[rows],
            strata=None if self.strata is None else self.strata[rows],
            binary_outcomes=self.binary_outcomes,
        )

    def with_delta_b(self, flags: np.ndarray) -> Frame:
        return Frame(
            ids=self.ids,
            x=self.x,
            y=self.y,
            covariate_names=self.covariate_names,
            outcome_names=self.outcome_names,
            delta_b=flags,
            strata=self.strata,
            binary_outcomes=self.binary_outcomes,
        )

    def with_strata(self, labels: np.ndarray) -> Frame:
        return Frame(
            ids=self.ids,
            x=self.x,
            y=self.y,
            covariate_names=self.covariate_names,
            outcome_names=self.outcome_names,
            delta_b=self.delta_b,
            strata=labels,
            binary_outcomes=self.binary_outcomes,
        )

    def schema(self) -> FrameSchema:
        return FrameSchema(
            covariates=list(self.covariate_names),
            outcomes=list(self.outcome_names),
            binary_outcomes=sorted(self.binary_outcomes),
            delta_b_column="delta_b" if self.delta_b is not None else None,
            stratum_column="stratum" if self.strata is not None else None,
        )


@dataclass(frozen=True, eq=False)
class ProbabilitySample:
    """Sample A: rows drawn with known first-order inclusion probabilities."""

    frame: Frame
    pi: np.ndarray
    design: DesignDescriptor
    population_size: int
    unit_index: np.ndarray

    def __post_init__(self) -> None:
        from massfuse.designs import ExplicitJoint, first_order_vector

        pi = np.array(self.pi, dtype=float).reshape(-1)
        unit_index = np.array(self.unit_index, dtype=np.int64).reshape(-1)
        n = self.frame.n_rows
        if pi.shape[0] != n or unit_index.shape[0] != n:
            raise SchemaError("pi and unit_index must have one entry per sample row")
        if n == 0:
            raise EmptyFrameError("Sample A has no rows")
        if not np.all((pi > 0) & (pi <= 1)):
            raise SchemaError("inclusion probabilities must lie in (0, 1]")
        if self.population_size < n:
            raise SchemaError(f"population size {self.population_size} is smaller than the sample ({n})")
        if not isinstance(self.design, ExplicitJoint):
            implied = first_order_vector(self.design, unit_index)
            if not np.allclose(implied, pi, rtol=0.0, atol=1e-12):
                raise SchemaError("stored pi disagrees with the design's closed-form inclusion probabilities")
        object.__setattr__(self, "pi", _frozen(pi))
        object.__setattr__(self, "unit_index", _frozen(unit_index))

    @property
    def n(self) -> int:
        return self.frame.n_rows

    @property
    def weights(self) -> np.ndarray:
        """Design weights d_i = 1/pi_i."""
        return 1.0 / self.pi


@dataclass(frozen=True, eq=False)
class BigSample:
    """Sample B: the non-probability source with X and Y observed on every row."""

    frame: Frame
    population_index: np.ndarray | None = None
    population: Frame | None = None

    def __post_init__(self) -> None:
        if self.frame.q == 0:
            raise SchemaError("Sample B must carry at least one outcome column")
        if not np.all(np.isfinite(self.frame.y)):
            raise SchemaError("Sample B outcomes must be fully observed")

    @property
    def n(self) -> int:
        return self.frame.n_rows


# --- g functions --------------------------------------------------------------


@dataclass(frozen=True)
class Identity:
    outcome: int


@dataclass(frozen=True)
class Indicator:
    outcome: int
    threshold: float


@dataclass(frozen=True)
class Product:
    first: int
    second: int


GFunction = Identity | Indicator | Product


def _outcome_indices(g: GFunction) -> tuple[int, ...]:
    match g:
        case Identity(outcome=j) | Indicator(outcome=j):
            return (j,)
        case Product(first=a, second=b):
            return (a, b)
    raise TypeError(f"not a g function: {g!r}")


def _check_indices(g: GFunction, q: int) -> None:
    for j in _outcome_indices(g):
        if not 0 <= j < q:
            raise IndexError(f"outcome index {j} out of range for {q} outcome(s)")


def apply_g(g: GFunction, record: UnitRecord) -> float:
    """Evaluate g on one unit's outcome vector."""
    _check_indices(g, len(record.y))
    match g:
        case Identity(outcome=j):
            return float(record.y[j])
        case Indicator(outcome=j, threshold=c):
            return 1.0 if record.y[j] < c else 0.0
        case Product(first=a, second=b):
            return float(record.y[a] * record.y[b])
    raise TypeError(f"not a g function: {g!r}")


def g_values(g: GFunction, y: np.ndarray | Frame) -> np.ndarray:
    """Vectorised apply_g over an outcome matrix (rows are units)."""
    if isinstance(y, Frame):
        y = y.y
    y = np.asarray(y, dtype=float)
    _check_indices(g, y.shape[1])
    match g:
        case Identity(outcome=j):
            return y[:, j].copy()
        case Indicator(outcome=j, threshold=c):
            return (y[:, j] < c).astype(float)
        case Product(first=a, second=b):
            return y[:, a] * y[:, b]
    raise TypeError(f"not a g function: {g!r}")


def g_label(g: GFunction, outcome_names: tuple[str, ...] | list[str] | None = None) -> str:
    def name(j: int) -> str:
        return outcome_names[j] if outcome_names and j < len(outcome_names) else f"y[{j}]"

    match g:
        case Identity(outcome=j):
            return name(j)
        case Indicator(outcome=j, threshold=c):
            return f"I({name(j)}<{c:g})"
        case Product(first=a, second=b):
            return f"{name(a)}*{name(b)}"
    raise TypeError(f"not a g function: {g!r}")


_G_PATTERN = re.compile(
    r"^(?:(?P<kind>identity|indicator|product):)?(?P<body>.+)$",
    re.IGNORECASE,
)


def parse_g(text: str, outcome_names: list[str] | tuple[str, ...]) -> GFunction:
    """Parse ``identity:y1``, ``indicator:y1<2.5`` or ``product:y1*y2`` (bare ``y1`` means identity)."""
    m = _G_PATTERN.match(text.strip())
    if not m:
        raise ValueError(f"cannot parse g function {text!r}")
    kind = (m.group("kind") or "identity").lower()
    body = m.group("body").strip()
    names = list(outcome_names)

    def index(name: str) -> int:
        name = name.strip()
        if name not in names:
            raise ValueError(f"g function {text!r} references unknown outcome {name!r}; outcomes are {names}")
        return names.index(name)

    if kind == "identity":
        return Identity(index(body))
    if kind == "indicator":
        column, sep, threshold = body.partition("<")
        if not sep:
            raise ValueError(f"indicator g function needs the form name<threshold, got {body!r}")
        return Indicator(index(column), float(threshold))
    first, sep, second = body.partition("*")
    if not sep:
        raise ValueError(f"product g function needs the form a*b, got {body!r}")
    return Product(index(first), index(second))


# --- CSV ingestion ---------------------------------------------------------------


def _parse_numeric(raw: pd.Series, column: str) -> np.ndarray:
    values = pd.to_numeric(raw.str.strip(), errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ParseError(row=i + 1, column=column, value=str(raw.iloc[i]))
    return values


def _read_columns(path: str | Path, schema: FrameSchema) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such file: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise SchemaError(f"{path} has no header row") from e

    missing = [c for c in schema.columns() if c not in raw.columns]
    if missing:
        raise SchemaError(f"{path} is missing column(s): {', '.join(missing)}")
    if raw.empty:
        raise EmptyFrameError(f"{path} has a header but no data rows")

    columns = {c: _parse_numeric(raw[c], c) for c in schema.columns()}
    for integral in (schema.id_column, schema.stratum_column, schema.delta_b_column):
        if integral and np.any(columns[integral] != np.floor(columns[integral])):
            i = int(np.flatnonzero(columns[integral] != np.floor(columns[integral]))[0])
            raise ParseError(row=i + 1, column=integral, value=str(raw[integral].iloc[i]))
    if schema.delta_b_column:
        flags = columns[schema.delta_b_column]
        if not np.all((flags == 0) | (flags == 1)):
            i = int(np.flatnonzero((flags != 0) & (flags != 1))[0])
            raise ParseError(row=i + 1, column=schema.delta_b_column, value=str(raw[schema.delta_b_column].iloc[i]))
    log.debug("Read %d rows from %s", len(raw), path)
    return columns


def _frame_from_columns(columns: dict[str, np.ndarray], schema: FrameSchema) -> Frame:
    n = len(columns[schema.covariates[0]])
    ids = columns[schema.id_column].astype(np.int64) if schema.id_column else np.arange(n)
    return Frame(
        ids=ids,
        x=np.column_stack([columns[c] for c in schema.covariates]),
        y=np.column_stack([columns[c] for c in schema.outcomes]) if schema.outcomes else np.empty((n, 0)),
        covariate_names=tuple(schema.covariates),
        outcome_names=tuple(schema.outcomes),
        delta_b=columns[schema.delta_b_column].astype(bool) if schema.delta_b_column else None,
        strata=columns[schema.stratum_column].astype(np.int64) if schema.stratum_column else None,
        binary_outcomes=frozenset(schema.binary_outcomes),
    )


def read_frame_csv(path: str | Path, schema: FrameSchema) -> Frame:
    """Read a UTF-8, comma-separated file with a header row into a Frame (row order preserved)."""
    return _frame_from_columns(_read_columns(path, schema), schema)


def read_sample_csv(
    path: str | Path,
    schema: FrameSchema,
    population_size: int,
    design: DesignDescriptor | None = None,
) -> ProbabilitySample:
    """Read Sample A; the schema must name the ``pi`` column. Without a design, SRSWOR{N, n} is assumed."""
    from massfuse.designs import SRSWOR, infer_unit_index

    if not schema.pi_column:
        raise SchemaError("Sample A needs an inclusion-probability column (schema.pi_column)")
    columns = _read_columns(path, schema)
    frame = _frame_from_columns(columns, schema)
    if design is None:
        design = SRSWOR(N=population_size, n=frame.n_rows)
    return ProbabilitySample(
        frame=frame,
        pi=columns[schema.pi_column],
        design=design,
        population_size=population_size,
        unit_index=infer_unit_index(design, frame),
    )


def read_big_sample_csv(path: str | Path, schema: FrameSchema) -> BigSample:
    return BigSample(frame=read_frame_csv(path, schema))


def write_frame_csv(frame: Frame, path: str | Path) -> Path:
    """Write a Frame in the canonical layout read_frame_csv accepts (id, covariates, outcomes, flags)."""
    data: dict[str, np.ndarray] = {"id": frame.ids}
    for j, name in enumerate(frame.covariate_names):
        data[name] = frame.x[:, j]
    for j, name in enumerate(frame.outcome_names):
        data[name] = frame.y[:, j]
    if frame.delta_b is not None:
        data["delta_b"] = frame.delta_b.astype(np.int64)
    if frame.strata is not None:
        data["stratum"] = frame.strata
    path = Path(path)
    pd.DataFrame(data).to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return path
