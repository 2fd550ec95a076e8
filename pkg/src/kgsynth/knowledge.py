"""Domain knowledge: property masks over raw columns and intra-row conditional rules."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .schema import DISCRETE, ColumnSpec, DataTable, TableSchema

log = logging.getLogger(__name__)

FLAG_CATEGORIES = ("0", "1")


class RuleError(ValueError):
    pass


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class GroupDef:
    """A property group; exactly one of ``values``, ``interval`` or ``prefix`` is set."""

    label: str
    values: tuple[str, ...] | None = None
    interval: tuple[int, int] | None = None
    prefix: str | None = None
    # suffix range drawn when materialising a prefix group
    suffix_range: tuple[int, int] = (0, 255)

    def __post_init__(self):
        set_kinds = sum(x is not None for x in (self.values, self.interval, self.prefix))
        if set_kinds != 1:
            raise MaskError(f"group {self.label!r}: give exactly one of values/interval/prefix")
        if self.values is not None:
            vals = tuple(str(v) for v in self.values)
            if not vals:
                raise MaskError(f"group {self.label!r}: empty value set")
            object.__setattr__(self, "values", vals)
        if self.interval is not None:
            lo, hi = (int(x) for x in self.interval)
            if lo > hi:
                raise MaskError(f"group {self.label!r}: interval lo > hi")
            object.__setattr__(self, "interval", (lo, hi))

    def contains(self, value: str) -> bool:
        if self.values is not None:
            return value in self.values
        if self.interval is not None:
            try:
                v = float(value)
            except ValueError:
                return False
            return v.is_integer() and self.interval[0] <= v <= self.interval[1]
        return value.startswith(self.prefix)

    def to_dict(self) -> dict:
        d: dict = {"label": self.label}
        if self.values is not None:
            d["values"] = list(self.values)
        elif self.interval is not None:
            d["interval"] = list(self.interval)
        else:
            d["prefix"] = self.prefix
            d["suffix_range"] = list(self.suffix_range)
        return d


@dataclass(frozen=True)
class PropertyMap:
    name: str
    source_column: str
    groups: tuple[GroupDef, ...]
    catch_all: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))

    @property
    def labels(self) -> tuple[str, ...]:
        labels = tuple(g.label for g in self.groups)
        return labels + ((self.catch_all,) if self.catch_all else ())

    def group(self, label: str) -> GroupDef:
        for g in self.groups:
            if g.label == label:
                return g
        raise KeyError(label)

    def classify(self, value: str) -> str:
        for g in self.groups:
            if g.contains(value):
                return g.label
        if self.catch_all:
            return self.catch_all
        raise MaskError(f"map {self.name!r}: value {value!r} of {self.source_column!r} is not covered by any group")

    def to_dict(self) -> dict:
        d = {"name": self.name, "source_column": self.source_column,
             "groups": [g.to_dict() for g in self.groups]}
        if self.catch_all:
            d["catch_all"] = self.catch_all
        return d


@dataclass(frozen=True)
class Rule:
    id: str
    antecedent: tuple[tuple[str, str], ...]
    consequent: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "antecedent", tuple((str(c), str(v)) for c, v in self.antecedent))
        object.__setattr__(self, "consequent", tuple((str(c), str(v)) for c, v in self.consequent))

    def holds(self, row: Mapping[str, str]) -> bool:
        return all(row.get(c) == v for c, v in self.antecedent)

    def satisfied(self, row: Mapping[str, str]) -> bool:
        return all(row.get(c) == v for c, v in self.consequent)

    def to_dict(self) -> dict:
        return {"id": self.id,
                "antecedent": [{"column": c, "value": v} for c, v in self.antecedent],
                "consequent": [{"column": c, "value": v} for c, v in self.consequent]}


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[Rule, ...] = ()
    property_maps: tuple[PropertyMap, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "property_maps", tuple(self.property_maps))

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.rules]

    def rule(self, rule_id: str) -> Rule:
        for r in self.rules:
            if r.id == rule_id:
                return r
        raise KeyError(rule_id)

    def map_named(self, name: str) -> PropertyMap:
        for m in self.property_maps:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"property_maps": [m.to_dict() for m in self.property_maps],
                "rules": [r.to_dict() for r in self.rules]}

    @classmethod
    def from_dict(cls, d: dict) -> RuleSet:
        maps = []
        for m in d.get("property_maps", []):
            groups = []
            for g in m["groups"]:
                groups.append(GroupDef(
                    label=g["label"],
                    values=tuple(g["values"]) if "values" in g else None,
                    interval=tuple(g["interval"]) if "interval" in g else None,
                    prefix=g.get("prefix"),
                    suffix_range=tuple(g.get("suffix_range", (0, 255))),
                ))
            maps.append(PropertyMap(m["name"], m["source_column"], tuple(groups), m.get("catch_all")))
        rules = []
        for r in d.get("rules", []):
            rules.append(Rule(
                id=str(r["id"]),
                antecedent=tuple((p["column"], p["value"]) for p in r["antecedent"]),
                consequent=tuple((p["column"], p["value"]) for p in r["consequent"]),
            ))
        return cls(tuple(rules), tuple(maps))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> RuleSet:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no such rules file: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise RuleError(f"{path}: malformed rules document ({exc})") from None


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Issue:
    kind: str
    message: str


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def kinds(self) -> set[str]:
        return {i.kind for i in self.issues}

    def add(self, kind: str, message: str) -> None:
        self.issues.append(Issue(kind, message))

    def __str__(self) -> str:
        return "\n".join(f"[{i.kind}] {i.message}" for i in self.issues) or "ok"


def masked_schema(schema: TableSchema, rules: RuleSet) -> TableSchema:
    """Schema after every property map replaced its source column by group labels."""
    out = schema
    for m in rules.property_maps:
        if m.source_column not in out:
            raise MaskError(f"map {m.name!r}: source column {m.source_column!r} absent (already masked?)")
        out = out.with_column(m.source_column, ColumnSpec(m.name, DISCRETE, m.labels, mask_of=m.source_column))
    return out


def validate_ruleset(rules: RuleSet, schema: TableSchema, table: DataTable | None = None) -> ValidationReport:
    """Report every structural problem; an empty report means the rule set is usable."""
    rep = ValidationReport()
    names = set(schema.names)
    removed = set()
    vocab: dict[str, set[str] | None] = {c.name: (set(c.categories) if c.categories else None)
                                          for c in schema.columns if not c.is_continuous}
    continuous = {c.name for c in schema.columns if c.is_continuous}

    for m in rules.property_maps:
        if len(set(m.labels)) != len(m.labels):
            rep.add("duplicate group", f"map {m.name!r} repeats a group label")
        if m.source_column not in names:
            rep.add("unknown column", f"map {m.name!r} masks unknown column {m.source_column!r}")
            continue
        if m.source_column in continuous:
            rep.add("continuous mask", f"map {m.name!r} masks continuous column {m.source_column!r}")
        if m.name in names and m.name != m.source_column:
            rep.add("name collision", f"map name {m.name!r} collides with an existing column")
        observed: set[str] = set()
        if schema.column(m.source_column).categories:
            observed |= set(schema.column(m.source_column).categories)
        if table is not None and m.source_column in table.schema:
            observed |= set(table[m.source_column].tolist())
        if not m.catch_all:
            uncovered = sorted(v for v in observed if not any(g.contains(v) for g in m.groups))
            if uncovered:
                rep.add("uncovered value", f"map {m.name!r} leaves {uncovered[:5]} uncovered")
        removed.add(m.source_column)
        vocab[m.name] = set(m.labels)

    seen_ids = set()
    for r in rules.rules:
        if r.id in seen_ids:
            rep.add("duplicate rule id", f"rule id {r.id!r} repeated")
        seen_ids.add(r.id)
        if r.id in vocab or r.id in names:
            rep.add("name collision", f"rule id {r.id!r} collides with a column name")
        if not r.antecedent:
            rep.add("empty antecedent", f"rule {r.id!r} has no antecedent")
        if not r.consequent:
            rep.add("empty consequent", f"rule {r.id!r} has no consequent")
        for part, preds in (("antecedent", r.antecedent), ("consequent", r.consequent)):
            for col, val in preds:
                if col in removed:
                    rep.add("unknown column", f"rule {r.id!r} {part} uses {col!r}, which is replaced by its mask")
                elif col in continuous:
                    rep.add("continuous column", f"rule {r.id!r} {part} uses continuous column {col!r}")
                elif col not in vocab:
                    rep.add("unknown column", f"rule {r.id!r} {part} references unknown column {col!r}")
                elif vocab[col] is not None and val not in vocab[col]:
                    rep.add("unknown category", f"rule {r.id!r} {part}: {val!r} is not a category of {col!r}")
        cons_cols = [c for c, _ in r.consequent]
        if len(set(cons_cols)) != len(cons_cols):
            rep.add("repeated consequent column", f"rule {r.id!r} assigns a column twice")
        ante = dict(r.antecedent)
        if len(ante) != len(r.antecedent):
            rep.add("contradictory antecedent", f"rule {r.id!r} constrains a column twice in its antecedent")
        for c, v in r.consequent:
            if c in ante and ante[c] != v:
                rep.add("conflict", f"rule {r.id!r} consequent {c}={v} contradicts its antecedent")

    by_ante: dict[frozenset, list[Rule]] = {}
    for r in rules.rules:
        by_ante.setdefault(frozenset(r.antecedent), []).append(r)
    for group in by_ante.values():
        merged: dict[str, tuple[str, str]] = {}
        for r in group:
            for c, v in r.consequent:
                if c in merged and merged[c][0] != v:
                    rep.add("conflict", f"rules {merged[c][1]!r} and {r.id!r} share an antecedent "
                                        f"but assign {c!r} to {merged[c][0]!r} vs {v!r}")
                merged.setdefault(c, (v, r.id))
    return rep


# ---------------------------------------------------------------------------
# masks


def apply_property_masks(table: DataTable, rules: RuleSet) -> DataTable:
    """Replace each masked raw column by a discrete column of its group labels."""
    schema = table.schema
    for m in rules.property_maps:
        if m.name in schema and schema.column(m.name).mask_of:
            raise MaskError(f"table is already masked by {m.name!r}")
    new_schema = masked_schema(schema, rules)
    data = dict(table.data)
    for m in rules.property_maps:
        raw = data.pop(m.source_column)
        cache: dict[str, str] = {}
        out = np.empty(len(raw), dtype=object)
        for i, v in enumerate(raw):
            lab = cache.get(v)
            if lab is None:
                lab = cache[v] = m.classify(v)
            out[i] = lab
        data[m.name] = out
    return DataTable(new_schema, data)


def decode_mask(group_label: str, pmap: PropertyMap, seed: int | np.random.Generator) -> str:
    """Draw a concrete member of a group, uniformly over its membership."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if group_label == pmap.catch_all:
        return group_label
    try:
        g = pmap.group(group_label)
    except KeyError:
        raise MaskError(f"map {pmap.name!r}: unknown group label {group_label!r}") from None
    if g.values is not None:
        return g.values[int(rng.integers(len(g.values)))]
    if g.interval is not None:
        return str(int(rng.integers(g.interval[0], g.interval[1] + 1)))
    lo, hi = g.suffix_range
    return f"{g.prefix}{int(rng.integers(lo, hi + 1))}"


def unmasked_schema(schema: TableSchema, rules: RuleSet) -> TableSchema:
    """Inverse of masked_schema: restore the raw (open-vocabulary) source columns."""
    out = schema
    for m in rules.property_maps:
        if m.name in out:
            out = out.with_column(m.name, ColumnSpec(m.source_column, DISCRETE, masked_by=m.name))
    return out


# ---------------------------------------------------------------------------
# rule flags, compliance and KG queries


def evaluate_rules(row: Mapping[str, str], rules: RuleSet) -> np.ndarray:
    """Flag k is 1 iff rule k's antecedent holds; consequents are not consulted."""
    return np.array([1 if r.holds(row) else 0 for r in rules.rules], dtype=np.int64)


def _column_match(table: DataTable, col: str, val: str) -> np.ndarray:
    return table[col] == val


def rule_flags(table: DataTable, rules: RuleSet) -> np.ndarray:
    """Vectorised evaluate_rules over a (masked) table, shape (n, K)."""
    n = table.row_count
    flags = np.zeros((n, len(rules.rules)), dtype=np.int64)
    for k, r in enumerate(rules.rules):
        hit = np.ones(n, dtype=bool)
        for c, v in r.antecedent:
            hit &= _column_match(table, c, v)
        flags[:, k] = hit
    return flags


@dataclass
class ComplianceReport:
    violations: dict[str, int]
    violating_rows: int
    total_rows: int
    vacuous: bool = False
    row_indices: list[int] = field(default_factory=list)

    @property
    def rate(self) -> float:
        if self.total_rows == 0:
            return 1.0
        return 1.0 - self.violating_rows / self.total_rows


def check_compliance(table: DataTable, rules: RuleSet) -> ComplianceReport:
    n = table.row_count
    bad = np.zeros(n, dtype=bool)
    per_rule = {}
    for r in rules.rules:
        hit = np.ones(n, dtype=bool)
        for c, v in r.antecedent:
            hit &= _column_match(table, c, v)
        ok = np.ones(n, dtype=bool)
        for c, v in r.consequent:
            ok &= _column_match(table, c, v)
        viol = hit & ~ok
        per_rule[r.id] = int(viol.sum())
        bad |= viol
    return ComplianceReport(per_rule, int(bad.sum()), n, vacuous=(n == 0),
                            row_indices=np.flatnonzero(bad).tolist())


def check_training_rows(table: DataTable, rules: RuleSet, policy: str = "error") -> ComplianceReport:
    """Training data must respect the rules; ``policy`` is ``error`` or ``warn``."""
    rep = check_compliance(table, rules)
    if rep.violating_rows:
        msg = f"{rep.violating_rows} training rows violate rules {rep.violations}; rows {rep.row_indices[:20]}"
        if policy == "error":
            raise RuleError(msg)
        log.warning("%s (kept)", msg)
    return rep


@dataclass(frozen=True)
class EnforcedAssignment:
    """One-hot targets (segment source, category) implied by a condition."""

    targets: tuple[tuple[str, str], ...]

    def as_dict(self) -> dict[str, str]:
        return dict(self.targets)


def kg_query(selection: tuple[str, str], rules: RuleSet) -> EnforcedAssignment:
    """Targets the knowledge base enforces for a single selected (segment, category).

    ``selection`` names either a column (raw discrete or mask) and one of its
    categories, or a rule id with flag category "0"/"1".
    """
    if not isinstance(selection, tuple) or len(selection) != 2:
        raise RuleError("condition must select exactly one (segment, category)")
    src, cat = selection
    ids = set(rules.ids)
    targets: dict[str, str] = {}

    def put(col: str, val: str):
        if col in targets and targets[col] != val:
            raise RuleError(f"inconsistent targets for {col!r}: {targets[col]!r} vs {val!r}")
        targets[col] = val

    if src in ids:
        if cat not in FLAG_CATEGORIES:
            raise RuleError(f"rule flag category must be one of {FLAG_CATEGORIES}")
        put(src, cat)
        if cat == "1":
            r = rules.rule(src)
            for c, v in r.antecedent + r.consequent:
                put(c, v)
    else:
        put(src, cat)
        for r in rules.rules:
            if r.antecedent and all(c == src and v == cat for c, v in r.antecedent):
                for c, v in r.consequent:
                    put(c, v)
    return EnforcedAssignment(tuple(targets.items()))


def flagged_table(table: DataTable, rules: RuleSet) -> DataTable:
    """Append one discrete "0"/"1" column per rule flag (column named by rule id)."""
    flags = rule_flags(table, rules)
    cols = list(table.schema.columns)
    data = dict(table.data)
    for k, r in enumerate(rules.rules):
        cols.append(ColumnSpec(r.id, DISCRETE, FLAG_CATEGORIES))
        data[r.id] = np.where(flags[:, k] == 1, "1", "0").astype(object)
    schema = replace(table.schema, columns=tuple(cols))
    return DataTable(schema, data)


def drop_columns(table: DataTable, names: Sequence[str]) -> DataTable:
    drop = set(names)
    cols = tuple(c for c in table.schema.columns if c.name not in drop)
    schema = replace(table.schema, columns=cols)
    return DataTable(schema, {c.name: table.data[c.name] for c in cols})
