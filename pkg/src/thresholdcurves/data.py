"""Dataset schema, CSV ingestion, minimal preprocessing and row filtering.

CSV contract: UTF-8, header row, comma separator, empty string = missing.
The schema document is JSON of the form

    {"x": [{"name": ..., "kind": "continuous" | "binary"}, ...],
     "z": [...], "t": "...", "a": "...", "y": "..."}
"""

from __future__ import annotations

import csv
import json
import operator
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SchemaError, ValidationError

KINDS = ("continuous", "binary")

_OPS = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: kind must be one of {KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class ColumnSchema:
    """Declares which columns hold covariates, proxies, time, decision, outcome."""

    x_columns: tuple[ColumnSpec, ...]
    z_columns: tuple[ColumnSpec, ...]
    t_column: str
    a_column: str
    y_column: str

    def __post_init__(self):
        if not self.x_columns:
            raise SchemaError("schema needs at least one x column")
        if not self.z_columns:
            raise SchemaError("schema needs at least one z column")
        names = self.all_names()
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in schema: {names}")

    def all_names(self) -> list[str]:
        return (
            [s.name for s in self.x_columns]
            + [s.name for s in self.z_columns]
            + [self.t_column, self.a_column, self.y_column]
        )

    @property
    def k(self) -> int:
        return len(self.x_columns)

    @property
    def p(self) -> int:
        return len(self.z_columns)

    @property
    def x_kinds(self) -> tuple[str, ...]:
        return tuple(s.kind for s in self.x_columns)

    @property
    def z_kinds(self) -> tuple[str, ...]:
        return tuple(s.kind for s in self.z_columns)

    def to_json(self) -> dict:
        return {
            "x": [{"name": s.name, "kind": s.kind} for s in self.x_columns],
            "z": [{"name": s.name, "kind": s.kind} for s in self.z_columns],
            "t": self.t_column,
            "a": self.a_column,
            "y": self.y_column,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ColumnSchema":
        try:
            return cls(
                x_columns=tuple(ColumnSpec(e["name"], e["kind"]) for e in doc["x"]),
                z_columns=tuple(ColumnSpec(e["name"], e["kind"]) for e in doc["z"]),
                t_column=doc["t"],
                a_column=doc["a"],
                y_column=doc["y"],
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc!r}") from exc

    @classmethod
    def load(cls, path) -> "ColumnSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class LoadOptions:
    impute_median: bool = True
    standardize: bool = True
    t_floor: float = 1e-4  # density vanishes at t = 0, so zeros are clamped


@dataclass(frozen=True)
class Provenance:
    rows_read: int
    cells_imputed: int
    rows_clamped: int


@dataclass(frozen=True)
class Dataset:
    """Immutable column store for one analysis cohort.

    ``standardization`` maps a continuous column name to the (mean, sd) that
    was subtracted/divided out, so values round-trip exactly.
    """

    schema: ColumnSchema
    x: np.ndarray  # (n, k) float
    z: np.ndarray  # (n, p) float
    t: np.ndarray  # (n,) hours, > 0
    a: np.ndarray  # (n,) int8 in {0, 1}
    y: np.ndarray  # (n,) int8 in {0, 1}
    standardization: dict = field(default_factory=dict)
    provenance: Provenance | None = None

    def __post_init__(self):
        n = self.t.shape[0]
        if n < 1:
            raise ValidationError("dataset must contain at least one row")
        if self.x.shape != (n, self.schema.k) or self.z.shape != (n, self.schema.p):
            raise ValidationError("x/z shapes do not match schema")
        for name, arr in (("a", self.a), ("y", self.y)):
            if not np.isin(arr, (0, 1)).all():
                raise ValidationError(f"column {name} must be binary")
        if np.any(self.t <= 0.0):
            raise ValidationError("t must be positive after clamping")
        for arr in (self.x, self.z, self.t, self.a, self.y):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.t.shape[0]

    def column(self, name: str) -> np.ndarray:
        """Return one column by schema name."""
        for j, s in enumerate(self.schema.x_columns):
            if s.name == name:
                return self.x[:, j]
        for j, s in enumerate(self.schema.z_columns):
            if s.name == name:
                return self.z[:, j]
        if name == self.schema.t_column:
            return self.t
        if name == self.schema.a_column:
            return self.a
        if name == self.schema.y_column:
            return self.y
        raise SchemaError(f"unknown column {name!r}")

    def row(self, i: int) -> "Observation":
        return Observation(x=self.x[i].copy(), z=self.z[i].copy(), t=float(self.t[i]),
                           a=int(self.a[i]), y=int(self.y[i]))

    def destandardize(self, name: str, values):
        """Invert the standardization applied to a continuous column."""
        mean, sd = self.standardization[name]
        return np.asarray(values) * sd + mean


@dataclass(frozen=True)
class Observation:
    """One visit: covariates, proxies, decision time, decision, outcome."""

    x: np.ndarray
    z: np.ndarray
    t: float
    a: int
    y: int


def _parse_cell(raw, kind, col, row_idx):
    if raw is None or raw.strip() == "":
        return None
    try:
        value = float(raw)
    except ValueError as exc:
        raise ValidationError(f"row {row_idx}, column {col!r}: unparseable cell {raw!r}") from exc
    if kind == "binary" and value not in (0.0, 1.0):
        raise ValidationError(f"row {row_idx}, column {col!r}: non-binary value {raw!r}")
    return value


def load_csv(path, schema: ColumnSchema, options: LoadOptions = LoadOptions()) -> Dataset:
    """Read a cohort CSV, impute/standardize continuous columns, clamp t.

    Leading lines starting with '#' carry run metadata and are skipped.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        pos = fh.tell()
        while True:
            line = fh.readline()
            if not line.startswith("#"):
                fh.seek(pos)
                break
            pos = fh.tell()
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [name for name in schema.all_names() if name not in header]
        if missing:
            raise SchemaError(f"file {path} is missing schema columns {missing}")
        rows = list(reader)

    n = len(rows)
    if n == 0:
        raise ValidationError(f"file {path} contains no data rows")

    specs = list(schema.x_columns) + list(schema.z_columns)
    mat = np.full((n, len(specs)), np.nan)
    for i, row in enumerate(rows):
        for j, spec in enumerate(specs):
            v = _parse_cell(row[spec.name], spec.kind, spec.name, i)
            if v is None:
                if spec.kind == "binary":
                    raise ValidationError(
                        f"row {i}, column {spec.name!r}: missing binary cell"
                    )
            else:
                mat[i, j] = v

    cells_imputed = 0
    standardization = {}
    for j, spec in enumerate(specs):
        col = mat[:, j]
        nan = np.isnan(col)
        if nan.any():
            if spec.kind != "continuous" or not options.impute_median:
                raise ValidationError(
                    f"column {spec.name!r} has {int(nan.sum())} missing cells and imputation is off"
                )
            col[nan] = np.median(col[~nan])
            cells_imputed += int(nan.sum())
        if spec.kind == "continuous" and options.standardize:
            mean = float(col.mean())
            sd = float(col.std(ddof=1)) if n > 1 else 1.0
            if sd == 0.0:
                sd = 1.0
            mat[:, j] = (col - mean) / sd
            standardization[spec.name] = (mean, sd)

    t = np.empty(n)
    a = np.empty(n, dtype=np.int8)
    y = np.empty(n, dtype=np.int8)
    rows_clamped = 0
    for i, row in enumerate(rows):
        tv = _parse_cell(row[schema.t_column], "continuous", schema.t_column, i)
        if tv is None:
            raise ValidationError(f"row {i}: missing time cell")
        if tv < 0.0:
            raise ValidationError(f"row {i}: negative time {tv}")
        if tv < options.t_floor:
            tv = options.t_floor
            rows_clamped += 1
        t[i] = tv
        av = _parse_cell(row[schema.a_column], "binary", schema.a_column, i)
        yv = _parse_cell(row[schema.y_column], "binary", schema.y_column, i)
        if av is None or yv is None:
            raise ValidationError(f"row {i}: missing decision or outcome cell")
        a[i], y[i] = int(av), int(yv)

    k = schema.k
    return Dataset(
        schema=schema,
        x=mat[:, :k].copy(),
        z=mat[:, k:].copy(),
        t=t,
        a=a,
        y=y,
        standardization=standardization,
        provenance=Provenance(rows_read=n, cells_imputed=cells_imputed, rows_clamped=rows_clamped),
    )


def filter_rows(ds: Dataset, predicate) -> Dataset:
    """Subset a dataset, keeping schema and standardization record.

    ``predicate`` is either a (column, op, value) triple with op in
    ==, !=, <, <=, >, >= or a callable mapping a row dict (keyed by column
    name) to bool.
    """
    if isinstance(predicate, (tuple, list)) and len(predicate) == 3:
        col, op, value = predicate
        if op not in _OPS:
            raise SchemaError(f"unknown filter operator {op!r}")
        mask = _OPS[op](ds.column(col), value)  # column() raises on bad name
    elif callable(predicate):
        names = ds.schema.all_names()
        mask = np.empty(ds.n, dtype=bool)
        for i in range(ds.n):
            row = {name: float(ds.column(name)[i]) for name in names}
            try:
                mask[i] = bool(predicate(row))
            except KeyError as exc:
                raise SchemaError(f"predicate referenced unknown column {exc}") from exc
    else:
        raise SchemaError("predicate must be a (column, op, value) triple or a callable")

    if not mask.any():
        raise ValidationError("filter removed every row")
    return replace(
        ds,
        x=ds.x[mask].copy(),
        z=ds.z[mask].copy(),
        t=ds.t[mask].copy(),
        a=ds.a[mask].copy(),
        y=ds.y[mask].copy(),
    )


def write_csv(path, ds: Dataset, extra_columns: dict | None = None,
              header_comment: str | None = None):
    """Write a dataset back to the standard CSV layout (one row per visit)."""
    names = ds.schema.all_names()
    extra = extra_columns or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(names + list(extra))
        cols = [ds.column(name) for name in names] + [np.asarray(v) for v in extra.values()]
        for i in range(ds.n):
            writer.writerow([repr(float(col[i])) if col.dtype.kind == "f" else int(col[i])
                             for col in cols])
