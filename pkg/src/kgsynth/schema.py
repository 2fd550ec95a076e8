"""Typed tabular schema, CSV loading and train/holdout splitting."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CONTINUOUS = "continuous"
DISCRETE = "discrete"


class SchemaError(ValueError):
    """Malformed schema or schema/data mismatch."""


class DataError(ValueError):
    """Data that cannot be loaded under a schema."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    categories: tuple[str, ...] | None = None
    masked_by: str | None = None
    # set on columns produced by apply_property_masks: name of the raw column
    mask_of: str | None = None

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, DISCRETE):
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CONTINUOUS and (self.categories is not None or self.masked_by):
            raise SchemaError(f"continuous column {self.name!r} cannot carry categories or a mask")
        if self.categories is not None:
            cats = tuple(str(c) for c in self.categories)
            if not cats:
                raise SchemaError(f"column {self.name!r}: empty category list")
            if len(set(cats)) != len(cats):
                raise SchemaError(f"column {self.name!r}: duplicate categories")
            object.__setattr__(self, "categories", cats)

    @property
    def is_continuous(self) -> bool:
        return self.kind == CONTINUOUS


@dataclass(frozen=True)
class TableSchema:
    columns: tuple[ColumnSpec, ...]
    target: str | None = None
    sensitive: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "sensitive", tuple(self.sensitive))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        for ref in ([self.target] if self.target else []) + list(self.sensitive):
            if ref not in names:
                raise SchemaError(f"unknown column {ref!r} referenced by target/sensitive")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def discrete(self) -> list[ColumnSpec]:
        return [c for c in self.columns if not c.is_continuous]

    def continuous(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.is_continuous]

    def with_column(self, name: str, spec: ColumnSpec) -> TableSchema:
        cols = tuple(spec if c.name == name else c for c in self.columns)
        target = spec.name if self.target == name else self.target
        sensitive = tuple(spec.name if s == name else s for s in self.sensitive)
        return TableSchema(cols, target, sensitive)

    # -- persistence ---------------------------------------------------
    def to_dict(self) -> dict:
        cols = []
        for c in self.columns:
            d = {"name": c.name, "kind": c.kind}
            if c.categories is not None:
                d["categories"] = list(c.categories)
            if c.masked_by:
                d["masked_by"] = c.masked_by
            if c.mask_of:
                d["mask_of"] = c.mask_of
            cols.append(d)
        return {"columns": cols, "target": self.target, "sensitive": list(self.sensitive)}

    @classmethod
    def from_dict(cls, d: dict) -> TableSchema:
        try:
            cols = [
                ColumnSpec(
                    name=c["name"],
                    kind=c["kind"],
                    categories=tuple(c["categories"]) if c.get("categories") is not None else None,
                    masked_by=c.get("masked_by"),
                    mask_of=c.get("mask_of"),
                )
                for c in d["columns"]
            ]
        except KeyError as exc:
            raise SchemaError(f"schema column entry missing field {exc}") from None
        return cls(tuple(cols), d.get("target"), tuple(d.get("sensitive") or ()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> TableSchema:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not a valid schema document ({exc})") from None


@dataclass(frozen=True)
class DataTable:
    """Column-oriented table; discrete cells are str labels, continuous cells float64."""

    schema: TableSchema
    data: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        n = None
        for c in self.schema.columns:
            if c.name not in self.data:
                raise DataError(f"missing column {c.name!r}")
            arr = self.data[c.name]
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise DataError("ragged columns")
            if c.is_continuous and not np.all(np.isfinite(arr)):
                raise DataError(f"column {c.name!r} has non-finite values")

    @property
    def row_count(self) -> int:
        if not self.schema.columns:
            return 0
        return len(self.data[self.schema.columns[0].name])

    def __len__(self) -> int:
        return self.row_count

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[name]

    @property
    def rows(self) -> list[tuple]:
        cols = [self.data[n] for n in self.schema.names]
        return [tuple(_py(c[i]) for c in cols) for i in range(self.row_count)]

    def row(self, i: int) -> dict:
        return {n: _py(self.data[n][i]) for n in self.schema.names}

    def codes(self, name: str) -> np.ndarray:
        """Integer category indices of a discrete column."""
        spec = self.schema.column(name)
        if spec.categories is None:
            raise SchemaError(f"column {name!r} has no frozen categories")
        lookup = {c: i for i, c in enumerate(spec.categories)}
        try:
            return np.fromiter((lookup[v] for v in self.data[name]), dtype=np.int64, count=self.row_count)
        except KeyError as exc:
            raise DataError(f"column {name!r}: unknown category {exc.args[0]!r}") from None

    def take(self, idx: Sequence[int] | np.ndarray) -> DataTable:
        idx = np.asarray(idx, dtype=np.int64)
        return DataTable(self.schema, {k: v[idx] for k, v in self.data.items()})

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.schema.names)
        cols = [self.data[n] for n in self.schema.names]
        kinds = [c.is_continuous for c in self.schema.columns]
        for i in range(self.row_count):
            w.writerow([repr(float(c[i])) if k else c[i] for c, k in zip(cols, kinds)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def equals(self, other: DataTable) -> bool:
        if self.schema != other.schema or self.row_count != other.row_count:
            return False
        return all(np.array_equal(self.data[n], other.data[n]) for n in self.schema.names)


def _py(v):
    return v.item() if isinstance(v, np.generic) else v


def from_columns(schema: TableSchema, columns: dict[str, Iterable], freeze: bool = True) -> DataTable:
    """Build a validated table from raw column values (labels / reals)."""
    data = {}
    new_schema = schema
    for spec in schema.columns:
        vals = list(columns[spec.name])
        if spec.is_continuous:
            arr = np.asarray(vals, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise DataError(f"column {spec.name!r}: non-finite value")
        else:
            arr = np.asarray([str(v) for v in vals], dtype=object)
            if spec.categories is not None:
                allowed = set(spec.categories)
                bad = [v for v in arr if v not in allowed]
                if bad:
                    raise DataError(f"column {spec.name!r}: unknown category {bad[0]!r}")
            elif freeze and not spec.masked_by:
                new_schema = new_schema.with_column(
                    spec.name, replace(spec, categories=tuple(sorted(set(arr))) or None)
                )
        data[spec.name] = arr
    return DataTable(new_schema, data)


def load_csv(path: str | Path, schema: TableSchema, missing_policy: str = "drop_row") -> DataTable:
    """Load a headered CSV under ``schema``.

    Columns are reordered to schema order. Discrete columns without declared
    categories get their sorted observed labels frozen into the returned
    table's schema; raw columns carrying a property mask stay open because
    their vocabulary is governed by the mask groups.
    """
    if missing_policy not in ("drop_row", "error"):
        raise ValueError(f"unknown missing_policy {missing_policy!r}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if set(header) != set(schema.names) or len(header) != len(schema.names):
            raise DataError(
                f"{path}: header mismatch; expected {sorted(schema.names)}, got {sorted(header)}"
            )
        pos = {h: i for i, h in enumerate(header)}
        specs = schema.columns
        cols: dict[str, list] = {c.name: [] for c in specs}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            parsed = []
            missing = False
            for spec in specs:
                cell = rec[pos[spec.name]].strip()
                if cell == "":
                    missing = True
                    break
                if spec.is_continuous:
                    try:
                        v = float(cell)
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: unparsable number {cell!r} in {spec.name!r}") from None
                    if not math.isfinite(v):
                        missing = True
                        break
                    parsed.append(v)
                else:
                    parsed.append(cell)
            if missing:
                if missing_policy == "error":
                    raise DataError(f"{path}:{lineno}: missing value")
                continue
            for spec, v in zip(specs, parsed):
                cols[spec.name].append(v)
    if not cols[specs[0].name]:
        raise DataError(f"{path}: empty table")
    return from_columns(schema, cols)


def split_train_holdout(table: DataTable, holdout_fraction: float, seed: int) -> tuple[DataTable, DataTable]:
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must lie in (0, 1)")
    n = table.row_count
    if n < 2:
        raise ValueError("need at least 2 rows to split")
    n_hold = int(round(holdout_fraction * n))
    n_hold = min(max(n_hold, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    hold = np.sort(perm[:n_hold])
    train = np.sort(perm[n_hold:])
    return table.take(train), table.take(hold)
