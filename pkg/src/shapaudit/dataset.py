"""Typed tabular data: loading, schema inference, and shared preprocessing.

Real and synthetic tables must pass through bit-identical transformations
before any model or metric touches them, so everything here is deterministic:
category interning is sorted, imputation is median/mode, and all sampling is
driven by explicit seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"
BINARY = "binary"
FEATURE = "feature"
TARGET = "target"

MISSING_CODE = -1
UNKNOWN_CATEGORY = "__unknown__"
MISSING_TOKENS = frozenset({"", "NA", "?"})

_KINDS = (NUMERIC, CATEGORICAL, BINARY)
_ROLES = (FEATURE, TARGET)


class DatasetError(ValueError):
    """Raised for malformed inputs or contract violations in this module."""


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    role: str = FEATURE

    def __post_init__(self) -> None:
        if not self.name:
            raise DatasetError("column name must be non-empty")
        if self.kind not in _KINDS:
            raise DatasetError(f"unknown column kind {self.kind!r}")
        if self.role not in _ROLES:
            raise DatasetError(f"unknown column role {self.role!r}")


class Table:
    """Immutable columnar table.

    Numeric columns are float64 with NaN as the missing marker. Categorical
    and binary columns are int64 codes (dense in [0, cardinality), -1 for
    missing) with an interned category list per column.
    """

    def __init__(
        self,
        schema: list[ColumnSchema] | tuple[ColumnSchema, ...],
        columns: dict[str, np.ndarray],
        categories: dict[str, tuple[str, ...]] | None = None,
    ) -> None:
        self.schema = tuple(schema)
        self.categories = dict(categories or {})

        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            raise DatasetError("duplicate column names in schema")
        targets = [c.name for c in self.schema if c.role == TARGET]
        if len(targets) != 1:
            raise DatasetError(f"schema must have exactly one target column, got {len(targets)}")
        if set(columns) != set(names):
            raise DatasetError("columns do not match schema names")

        lengths = {len(columns[n]) for n in names} or {0}
        if len(lengths) != 1:
            raise DatasetError("columns have unequal lengths")
        self.row_count = lengths.pop()

        self.columns: dict[str, np.ndarray] = {}
        for col in self.schema:
            arr = np.asarray(columns[col.name])
            if col.kind == NUMERIC:
                arr = arr.astype(np.float64, copy=True)
            else:
                arr = arr.astype(np.int64, copy=True)
                cats = self.categories.get(col.name)
                if cats is None:
                    raise DatasetError(f"column {col.name!r} is coded but has no categories")
                valid = arr[arr != MISSING_CODE]
                if valid.size and (valid.min() < 0 or valid.max() >= len(cats)):
                    raise DatasetError(f"column {col.name!r} has codes outside [0, {len(cats)})")
            arr.setflags(write=False)
            self.columns[col.name] = arr

    # -- accessors ---------------------------------------------------------

    @property
    def target_name(self) -> str:
        return next(c.name for c in self.schema if c.role == TARGET)

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.schema if c.role == FEATURE]

    def column_schema(self, name: str) -> ColumnSchema:
        for c in self.schema:
            if c.name == name:
                return c
        raise DatasetError(f"no column named {name!r}")

    def feature_matrix(self) -> np.ndarray:
        """Features as a row-major float64 matrix; codes become floats, missing becomes NaN."""
        cols = []
        for c in self.schema:
            if c.role != FEATURE:
                continue
            arr = self.columns[c.name]
            if c.kind == NUMERIC:
                cols.append(arr)
            else:
                f = arr.astype(np.float64)
                f[arr == MISSING_CODE] = np.nan
                cols.append(f)
        if not cols:
            return np.empty((self.row_count, 0), dtype=np.float64)
        return np.column_stack(cols)

    def target_codes(self) -> np.ndarray:
        """Binary target as an int64 0/1 array."""
        col = self.column_schema(self.target_name)
        arr = self.columns[self.target_name]
        if col.kind != BINARY:
            raise DatasetError(f"target column {col.name!r} is not binary")
        if np.any(arr == MISSING_CODE):
            raise DatasetError("target column contains missing values")
        return arr.copy()

    def select_rows(self, indices: np.ndarray) -> "Table":
        cols = {c.name: self.columns[c.name][indices] for c in self.schema}
        return Table(self.schema, cols, self.categories)

    # -- serialization -----------------------------------------------------

    def content_digest(self) -> str:
        h = hashlib.sha256()
        for c in self.schema:
            h.update(f"{c.name}|{c.kind}|{c.role}\n".encode())
            if c.kind != NUMERIC:
                h.update(json.dumps(self.categories[c.name]).encode())
            h.update(self.columns[c.name].tobytes())
        return h.hexdigest()

    def to_csv(self, path: str | Path) -> None:
        """Write RFC-4180 CSV; numeric cells use shortest round-trip floats, missing cells are empty.

        Reloading with this table's schema reproduces every numeric cell
        bit-exactly and every categorical cell code-exactly.
        """
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([c.name for c in self.schema])
            for i in range(self.row_count):
                row = []
                for c in self.schema:
                    v = self.columns[c.name][i]
                    if c.kind == NUMERIC:
                        row.append("" if math.isnan(v) else repr(float(v)))
                    else:
                        row.append("" if v == MISSING_CODE else self.categories[c.name][v])
                writer.writerow(row)


@dataclass(frozen=True)
class PreprocessSpec:
    """Preprocessing configuration; imputation is fixed to median (numeric) / mode (categorical)."""

    encoding: str = "label"          # label | one-hot
    normalization: str = "none"      # none | min-max | z-score
    undersample: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.encoding not in ("label", "one-hot"):
            raise DatasetError(f"unknown encoding {self.encoding!r}")
        if self.normalization not in ("none", "min-max", "z-score"):
            raise DatasetError(f"unknown normalization {self.normalization!r}")


@dataclass
class FittedTransform:
    """Per-column imputation, encoding, and normalization parameters fitted on the real table."""

    spec: PreprocessSpec
    numeric_impute: dict[str, float]
    numeric_scale: dict[str, tuple[float, float]]  # (offset, scale): x -> (x - offset) / scale
    category_maps: dict[str, dict[str, int]]       # fitted category string -> code
    category_lists: dict[str, tuple[str, ...]]
    mode_codes: dict[str, int]
    warnings: list[str] = field(default_factory=list)


# -- parsing and inference --------------------------------------------------


def _parse_number(cell: str) -> float | None:
    try:
        return float(cell)
    except ValueError:
        return None


def _sorted_categories(values: set[str]) -> tuple[str, ...]:
    # Numeric-looking category sets sort by value so that e.g. a 0/1 target
    # maps 0 -> code 0, 1 -> code 1 regardless of string formatting.
    parsed = {v: _parse_number(v) for v in values}
    if all(p is not None for p in parsed.values()):
        return tuple(sorted(values, key=lambda v: (parsed[v], v)))
    return tuple(sorted(values))


def _read_raw(path: str | Path) -> tuple[list[str], list[list[str]]]:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"no such file: {p}")
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"no header in {p}") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise DatasetError(f"duplicate header names in {p}")
        rows = []
        for row in reader:
            if len(row) != len(header):
                raise DatasetError(f"row with {len(row)} cells does not match {len(header)}-column header in {p}")
            rows.append([c.strip() for c in row])
    return header, rows


def infer_schema(
    header: list[str],
    rows: list[list[str]],
    target_name: str | None = None,
    overrides: dict[str, dict[str, str]] | None = None,
) -> list[ColumnSchema]:
    """Infer column kinds from raw string cells.

    All-numeric columns with more than two distinct values are numeric; columns
    whose non-missing values form {0, 1} or any two distinct values are binary;
    everything else is categorical. The target column is ``target_name`` if
    given, else a column literally named "target" (case-insensitive), else the
    last column. ``overrides`` (name -> {kind, role}) wins over inference.
    """
    if not rows:
        raise DatasetError("cannot infer schema from zero rows")
    overrides = overrides or {}

    if target_name is None:
        lowered = [h.lower() for h in header]
        target_name = header[lowered.index("target")] if "target" in lowered else header[-1]
        for name, ov in overrides.items():
            if ov.get("role") == TARGET:
                target_name = name
    if target_name not in header:
        raise DatasetError(f"target column {target_name!r} absent from header")

    schema = []
    for j, name in enumerate(header):
        cells = [r[j] for r in rows if r[j] not in MISSING_TOKENS]
        if not cells:
            raise DatasetError(f"column {name!r} is entirely missing")
        distinct = set(cells)
        numbers = [_parse_number(c) for c in distinct]
        all_numeric = all(n is not None for n in numbers)
        if all_numeric and len(set(numbers)) > 2:
            kind = NUMERIC
        elif all_numeric and set(numbers) <= {0.0, 1.0}:
            kind = BINARY
        elif len(distinct) == 2:
            kind = BINARY
        elif all_numeric:
            kind = NUMERIC  # constant numeric column
        else:
            kind = CATEGORICAL
        role = TARGET if name == target_name else FEATURE
        ov = overrides.get(name)
        if ov:
            kind = ov.get("kind", kind)
            role = ov.get("role", role)
        schema.append(ColumnSchema(name, kind, role))
    return schema


def read_schema_overrides(path: str | Path) -> dict[str, dict[str, str]]:
    """Read a JSON schema override file mapping column name -> {kind, role}."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise DatasetError("schema override file must be a JSON object")
    return {str(k): dict(v) for k, v in raw.items()}


def _build_table(header: list[str], rows: list[list[str]], schema: list[ColumnSchema]) -> Table:
    by_name = {c.name: c for c in schema}
    ordered = [by_name[h] for h in header if h in by_name]
    columns: dict[str, np.ndarray] = {}
    categories: dict[str, tuple[str, ...]] = {}
    for j, name in enumerate(header):
        if name not in by_name:
            continue
        col = by_name[name]
        cells = [r[j] for r in rows]
        if col.kind == NUMERIC:
            arr = np.empty(len(cells), dtype=np.float64)
            for i, c in enumerate(cells):
                if c in MISSING_TOKENS:
                    arr[i] = np.nan
                else:
                    v = _parse_number(c)
                    arr[i] = np.nan if v is None else v
            columns[name] = arr
        else:
            present = {c for c in cells if c not in MISSING_TOKENS}
            cats = _sorted_categories(present)
            code_of = {c: i for i, c in enumerate(cats)}
            arr = np.array(
                [MISSING_CODE if c in MISSING_TOKENS else code_of[c] for c in cells],
                dtype=np.int64,
            )
            columns[name] = arr
            categories[name] = cats
    return Table(ordered, columns, categories)


def load_csv(
    path: str | Path,
    schema: list[ColumnSchema] | None = None,
    overrides: dict[str, dict[str, str]] | None = None,
) -> Table:
    """Load a CSV file with a header row into a typed Table.

    Empty cells, "NA", and "?" are missing. With an explicit schema, the header
    must contain every schema name and only schema columns are kept; otherwise
    kinds are inferred from the data, with ``overrides`` (name -> {kind, role})
    taking precedence per column.
    """
    header, rows = _read_raw(path)
    if schema is None:
        schema = infer_schema(header, rows, overrides=overrides)
    else:
        missing = [c.name for c in schema if c.name not in header]
        if missing:
            raise DatasetError(f"schema columns absent from header: {missing}")
        if not any(c.role == TARGET for c in schema):
            raise DatasetError("target column absent from schema")
    return _build_table(header, rows, schema)


# -- transform fitting and application ---------------------------------------


def fit_transform(real: Table, spec: PreprocessSpec) -> FittedTransform:
    """Fit imputation, encoding, and normalization parameters on the real table only."""
    if real.row_count < 2:
        raise DatasetError("need at least 2 rows to fit a transform")
    y = real.target_codes()
    if np.unique(y).size < 2:
        raise DatasetError("target column has fewer than 2 classes")

    numeric_impute: dict[str, float] = {}
    numeric_scale: dict[str, tuple[float, float]] = {}
    category_maps: dict[str, dict[str, int]] = {}
    category_lists: dict[str, tuple[str, ...]] = {}
    mode_codes: dict[str, int] = {}
    warnings: list[str] = []

    for col in real.schema:
        arr = real.columns[col.name]
        if col.kind == NUMERIC:
            finite = arr[~np.isnan(arr)]
            if finite.size == 0:
                raise DatasetError(f"column {col.name!r} is entirely missing")
            numeric_impute[col.name] = float(np.median(finite))
            if spec.normalization == "min-max":
                lo, hi = float(finite.min()), float(finite.max())
                scale = hi - lo
                if scale == 0.0:
                    scale = 1.0
                    warnings.append(f"constant numeric column {col.name!r}: min-max scale set to 1")
                numeric_scale[col.name] = (lo, scale)
            elif spec.normalization == "z-score":
                mean = float(finite.mean())
                std = float(finite.std(ddof=0))
                if std == 0.0:
                    std = 1.0
                    warnings.append(f"constant numeric column {col.name!r}: z-score scale set to 1")
                numeric_scale[col.name] = (mean, std)
        else:
            cats = real.categories[col.name]
            category_lists[col.name] = cats
            category_maps[col.name] = {c: i for i, c in enumerate(cats)}
            codes = arr[arr != MISSING_CODE]
            if codes.size == 0:
                raise DatasetError(f"column {col.name!r} is entirely missing")
            counts = np.bincount(codes, minlength=len(cats))
            mode_codes[col.name] = int(np.argmax(counts))  # ties break to the smallest code

    return FittedTransform(
        spec=spec,
        numeric_impute=numeric_impute,
        numeric_scale=numeric_scale,
        category_maps=category_maps,
        category_lists=category_lists,
        mode_codes=mode_codes,
        warnings=warnings,
    )


def apply_transform(table: Table, t: FittedTransform, *, normalize: bool = True) -> Table:
    """Impute, re-encode, and optionally normalize a table through a fitted transform.

    Categories unseen at fit time map to a reserved unknown code; min-max and
    z-score outputs are not clamped, so synthetic values outside the real range
    land outside [0, 1]. With normalization "none" the transform is idempotent;
    with min-max or z-score, re-applying rescales already-scaled values.
    """
    fitted_names = set(t.numeric_impute) | set(t.category_maps)
    table_names = {c.name for c in table.schema}
    missing = sorted(fitted_names - table_names)
    if missing:
        raise DatasetError(f"table lacks fitted columns: {missing}")

    schema: list[ColumnSchema] = []
    columns: dict[str, np.ndarray] = {}
    categories: dict[str, tuple[str, ...]] = {}
    one_hot = t.spec.encoding == "one-hot"

    for col in table.schema:
        if col.name not in fitted_names:
            continue
        arr = table.columns[col.name]
        if col.kind == NUMERIC:
            out = arr.copy()
            out[np.isnan(out)] = t.numeric_impute[col.name]
            if normalize and col.name in t.numeric_scale:
                offset, scale = t.numeric_scale[col.name]
                out = (out - offset) / scale
            schema.append(col)
            columns[col.name] = out
        else:
            cats = t.category_lists[col.name]
            unknown = len(cats)
            code_of = t.category_maps[col.name]
            src_cats = table.categories[col.name]
            if src_cats:
                remap = np.array([code_of.get(c, unknown) for c in src_cats], dtype=np.int64)
                mapped = remap[np.maximum(arr, 0)]
            else:  # every cell missing
                mapped = np.zeros(len(arr), dtype=np.int64)
            out = np.where(arr == MISSING_CODE, t.mode_codes[col.name], mapped)
            if one_hot and col.role == FEATURE:
                for code, cat in enumerate(cats):
                    name = f"{col.name}={cat}"
                    schema.append(ColumnSchema(name, NUMERIC, FEATURE))
                    columns[name] = (out == code).astype(np.float64)
            else:
                schema.append(col)
                columns[col.name] = out
                categories[col.name] = cats + (UNKNOWN_CATEGORY,)
    return Table(schema, columns, categories)


# -- balancing and splitting -------------------------------------------------


def _undersample_indices(y: np.ndarray, seed: int) -> np.ndarray:
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise DatasetError("degenerate target: only one class present")
    if classes.size > 2:
        raise DatasetError(f"target has {classes.size} classes; only binary targets are supported")
    if counts[0] == counts[1]:
        return np.arange(y.size)
    minority = classes[np.argmin(counts)]
    majority = classes[1 - int(np.argmin(counts))]
    n_min = int(counts.min())
    rng = np.random.default_rng(seed)
    majority_idx = np.nonzero(y == majority)[0]
    kept_majority = rng.choice(majority_idx, size=n_min, replace=False)
    keep = np.concatenate([np.nonzero(y == minority)[0], kept_majority])
    return np.sort(keep)


def undersample(table: Table, seed: int) -> Table:
    """Drop random majority-class rows until classes balance; original row order is kept."""
    return table.select_rows(_undersample_indices(table.target_codes(), seed))


def split(table: Table, test_fraction: float, seed: int) -> tuple[Table, Table]:
    """Deterministic stratified train/test split; every class keeps at least one row per side."""
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if table.row_count < 4:
        raise DatasetError("need at least 4 rows to split")
    y = table.target_codes()
    rng = np.random.default_rng(seed)
    test_idx: list[np.ndarray] = []
    for cls in np.unique(y):
        idx = np.nonzero(y == cls)[0]
        if idx.size < 2:
            raise DatasetError(f"class {cls} has fewer than 2 rows; cannot keep one per side")
        n_test = int(round(test_fraction * idx.size))
        n_test = min(max(n_test, 1), idx.size - 1)
        chosen = rng.choice(idx, size=n_test, replace=False)
        test_idx.append(chosen)
    test_mask = np.zeros(table.row_count, dtype=bool)
    test_mask[np.concatenate(test_idx)] = True
    return table.select_rows(np.nonzero(~test_mask)[0]), table.select_rows(np.nonzero(test_mask)[0])
