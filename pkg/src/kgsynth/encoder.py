"""Row representation: mode-specific normalisation plus one-hot segments.

Encoded rows are laid out as all (alpha, beta) pairs of continuous columns,
then raw discrete one-hots, then property-mask one-hots, then one width-2
one-hot per rule flag (index 1 means the rule's antecedent holds).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .knowledge import FLAG_CATEGORIES, RuleSet, decode_mask, kg_query, rule_flags
from .schema import DataTable, TableSchema, from_columns

log = logging.getLogger(__name__)

ALPHA, BETA = "alpha", "beta"
DISCRETE_ONEHOT, MASK_ONEHOT, RULE_FLAG = "discrete_onehot", "mask_onehot", "rule_flag_onehot"
SELECTABLE = (DISCRETE_ONEHOT, MASK_ONEHOT, RULE_FLAG)
STD_FLOOR = 1e-6


class EncodingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Gaussian mixture for a single continuous column


@dataclass(frozen=True)
class ContinuousEncoding:
    column: str
    weights: tuple[float, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]
    degenerate: bool = False

    @property
    def n_modes(self) -> int:
        return len(self.weights)

    def responsibilities(self, values: np.ndarray) -> np.ndarray:
        return _responsibilities(np.asarray(values, dtype=np.float64), np.array(self.weights),
                                 np.array(self.means), np.array(self.stds))[0]

    def to_dict(self) -> dict:
        return {"column": self.column, "weights": list(self.weights), "means": list(self.means),
                "stds": list(self.stds), "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d: dict) -> ContinuousEncoding:
        return cls(d["column"], tuple(d["weights"]), tuple(d["means"]), tuple(d["stds"]), d.get("degenerate", False))


def _log_normal(x, mu, sd):
    z = (x[:, None] - mu[None, :]) / sd[None, :]
    return -0.5 * z * z - np.log(sd)[None, :] - 0.5 * math.log(2 * math.pi)


def _responsibilities(x, w, mu, sd):
    lp = _log_normal(x, mu, sd) + np.log(w)[None, :]
    m = lp.max(axis=1, keepdims=True)
    ll = m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))
    return np.exp(lp - ll[:, None]), ll


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = (x - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, (x - x[idx]) ** 2)
    return np.array(centers)


def _em(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float):
    centers = _kmeanspp(x, k, rng)
    k = len(centers)
    assign = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
    spread = max(np.std(x), STD_FLOOR)
    w = np.array([max((assign == j).mean(), 1e-3) for j in range(k)])
    w /= w.sum()
    mu = centers.astype(np.float64)
    sd = np.array([np.std(x[assign == j]) if (assign == j).sum() > 1 else spread for j in range(k)])
    sd = np.maximum(sd, STD_FLOOR)
    prev = -np.inf
    ll_mean = -np.inf
    for _ in range(max_iter):
        resp, ll = _responsibilities(x, w, mu, sd)
        ll_mean = ll.mean()
        nk = resp.sum(axis=0) + 1e-12
        w = nk / nk.sum()
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk
        sd = np.maximum(np.sqrt(var), STD_FLOOR)
        if abs(ll_mean - prev) < tol:
            break
        prev = ll_mean
    _, ll = _responsibilities(x, w, mu, sd)
    return w, mu, sd, ll.sum()


def fit_continuous_gmm(values: Sequence[float], max_modes: int = 10, weight_threshold: float = 0.005,
                       seed: int = 0, column: str = "", max_iter: int = 100, tol: float = 1e-6) -> ContinuousEncoding:
    """EM mixture fit; the component count is chosen by BIC over 1..max_modes.

    Components lighter than ``weight_threshold`` are dropped and the rest
    renormalised. A constant column yields one mode with stdev STD_FLOOR.
    """
    x = np.asarray(values, dtype=np.float64)
    if max_modes < 1:
        raise ValueError("max_modes must be >= 1")
    if x.size == 0:
        raise EncodingError(f"column {column!r}: no values")
    distinct = np.unique(x)
    if distinct.size < 2:
        log.warning("column %r is constant; using a single degenerate mode", column)
        return ContinuousEncoding(column, (1.0,), (float(x[0]),), (STD_FLOOR,), degenerate=True)
    rng = np.random.default_rng(seed)
    best = None
    n = x.size
    for k in range(1, min(max_modes, distinct.size) + 1):
        w, mu, sd, ll = _em(x, k, rng, max_iter, tol)
        bic = -2.0 * ll + (3 * len(w) - 1) * math.log(n)
        if best is None or bic < best[0]:
            best = (bic, w, mu, sd)
    _, w, mu, sd = best
    keep = w >= weight_threshold
    if not keep.any():
        keep = w == w.max()
    order = np.argsort(mu[keep], kind="stable")
    w, mu, sd = w[keep][order], mu[keep][order], sd[keep][order]
    w = w / w.sum()
    return ContinuousEncoding(column, tuple(map(float, w)), tuple(map(float, mu)), tuple(map(float, sd)))


# ---------------------------------------------------------------------------
# layout


@dataclass(frozen=True)
class Segment:
    id: str
    source: str
    kind: str
    start: int
    width: int
    categories: tuple[str, ...] = ()

    @property
    def stop(self) -> int:
        return self.start + self.width


@dataclass
class RowEncoder:
    """Fitted layout: segments, mixture encodings and the table schema it expects."""

    schema: TableSchema  # masked schema (no flag columns)
    rules: RuleSet
    encodings: dict[str, ContinuousEncoding]
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        if not self.segments:
            self.segments = self._build_segments()
        self._by_source = {}
        for s in self.segments:
            self._by_source.setdefault(s.source, []).append(s)
        sel = [s for s in self.segments if s.kind in SELECTABLE]
        self.cond_segments = sel
        offs = np.cumsum([0] + [s.width for s in sel])
        self.cond_offsets = {s.source: int(o) for s, o in zip(sel, offs[:-1])}
        self.cond_width = int(offs[-1])

    def _build_segments(self) -> list[Segment]:
        segs: list[Segment] = []
        pos = 0

        def push(sid, source, kind, width, cats=()):
            nonlocal pos
            segs.append(Segment(sid, source, kind, pos, width, tuple(cats)))
            pos += width

        for c in self.schema.continuous():
            enc = self.encodings[c.name]
            push(f"{c.name}.alpha", c.name, ALPHA, 1)
            push(f"{c.name}.beta", c.name, BETA, enc.n_modes)
        for c in self.schema.discrete():
            if not c.mask_of:
                if c.categories is None:
                    raise EncodingError(f"discrete column {c.name!r} has no frozen categories")
                push(c.name, c.name, DISCRETE_ONEHOT, len(c.categories), c.categories)
        for c in self.schema.discrete():
            if c.mask_of:
                push(c.name, c.name, MASK_ONEHOT, len(c.categories), c.categories)
        for r in self.rules.rules:
            push(r.id, r.id, RULE_FLAG, 2, FLAG_CATEGORIES)
        return segs

    # -- geometry -------------------------------------------------------
    @property
    def total_width(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def segment(self, source: str, kind: str | None = None) -> Segment:
        for s in self._by_source.get(source, []):
            if kind is None or s.kind == kind:
                return s
        raise KeyError(source)

    def alpha_columns(self) -> np.ndarray:
        return np.array([s.start for s in self.segments if s.kind == ALPHA], dtype=np.int64)

    def categorical_segments(self) -> list[Segment]:
        return [s for s in self.segments if s.kind != ALPHA]

    def softmax_bounds(self) -> list[tuple[int, int]]:
        return [(s.start, s.stop) for s in self.categorical_segments()]

    def cond_index(self, source: str, category: str) -> int:
        seg = self.segment(source)
        if seg.kind not in SELECTABLE:
            raise EncodingError(f"{source!r} is not a selectable segment")
        return self.cond_offsets[source] + seg.categories.index(category)

    def cond_selection(self, index: int) -> tuple[str, str]:
        for s in self.cond_segments:
            off = self.cond_offsets[s.source]
            if off <= index < off + s.width:
                return s.source, s.categories[index - off]
        raise IndexError(index)

    def cond_vectors(self, indices: np.ndarray) -> np.ndarray:
        out = np.zeros((len(indices), self.cond_width))
        out[np.arange(len(indices)), indices] = 1.0
        return out

    def target_matrix(self) -> np.ndarray:
        """Row c marks the output columns KG(cond c) enforces (0/1)."""
        T = np.zeros((self.cond_width, self.total_width))
        for c in range(self.cond_width):
            for src, cat in kg_query(self.cond_selection(c), self.rules).targets:
                seg = self.segment(src)
                T[c, seg.start + seg.categories.index(cat)] = 1.0
        return T

    # -- encoding -------------------------------------------------------
    def encode(self, table: DataTable, seed: int | np.random.Generator, flags: np.ndarray | None = None,
               sample_modes: bool = True, clamp: bool = True) -> np.ndarray:
        """Encode a masked table; continuous modes are drawn from the posterior."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n = table.row_count
        out = np.zeros((n, self.total_width))
        if flags is None:
            flags = rule_flags(table, self.rules)
        for s in self.segments:
            if s.kind == ALPHA:
                enc = self.encodings[s.source]
                x = np.asarray(table[s.source], dtype=np.float64)
                resp = enc.responsibilities(x)
                if sample_modes:
                    cum = np.cumsum(resp, axis=1)
                    u = rng.random(n)[:, None]
                    k = np.minimum((u > cum).sum(axis=1), enc.n_modes - 1)
                else:
                    k = resp.argmax(axis=1)
                mu = np.array(enc.means)[k]
                sd = np.array(enc.stds)[k]
                a = (x - mu) / (4.0 * sd)
                out[:, s.start] = np.clip(a, -1.0, 1.0) if clamp else a
                beta = self.segment(s.source, BETA)
                out[np.arange(n), beta.start + k] = 1.0
            elif s.kind in (DISCRETE_ONEHOT, MASK_ONEHOT):
                out[np.arange(n), s.start + table.codes(s.source)] = 1.0
            elif s.kind == RULE_FLAG:
                k = self.rules.ids.index(s.source)
                out[np.arange(n), s.start + flags[:, k]] = 1.0
        return out

    def encode_row(self, row: Mapping[str, object], seed: int) -> np.ndarray:
        cols = {c.name: [row[c.name]] for c in self.schema.columns}
        return self.encode(from_columns(self.schema, cols, freeze=False), seed)[0]

    def decode(self, encoded: np.ndarray, seed: int | np.random.Generator, materialize_masks: bool = True) -> DataTable:
        """Invert encode: argmax per segment, alpha*4*std + mean, masks drawn from their groups.

        Rule-flag segments are dropped. With ``materialize_masks`` the output
        carries the raw source columns in the mask columns' positions.
        """
        from .knowledge import unmasked_schema

        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        encoded = np.atleast_2d(np.asarray(encoded, dtype=np.float64))
        n = encoded.shape[0]
        cols: dict[str, object] = {}
        for s in self.segments:
            if s.kind == ALPHA:
                enc = self.encodings[s.source]
                beta = self.segment(s.source, BETA)
                k = encoded[:, beta.start:beta.stop].argmax(axis=1)
                a = np.clip(encoded[:, s.start], -1.0, 1.0)
                cols[s.source] = a * 4.0 * np.array(enc.stds)[k] + np.array(enc.means)[k]
            elif s.kind in (DISCRETE_ONEHOT, MASK_ONEHOT):
                idx = encoded[:, s.start:s.stop].argmax(axis=1)
                cols[s.source] = np.array(s.categories, dtype=object)[idx]
        if not materialize_masks or not self.rules.property_maps:
            return DataTable(self.schema, {c.name: _as_array(cols[c.name], c.is_continuous) for c in self.schema.columns})
        raw_schema = unmasked_schema(self.schema, self.rules)
        for m in self.rules.property_maps:
            labels = cols.pop(m.name)
            vals = np.empty(n, dtype=object)
            for i, lab in enumerate(labels):
                vals[i] = decode_mask(lab, m, rng)
            cols[m.source_column] = vals
        return DataTable(raw_schema, {c.name: _as_array(cols[c.name], c.is_continuous) for c in raw_schema.columns})

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "encodings": {k: v.to_dict() for k, v in self.encodings.items()},
            "segments": [{"id": s.id, "source": s.source, "kind": s.kind, "start": s.start, "width": s.width,
                          "categories": list(s.categories)} for s in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict, rules: RuleSet) -> RowEncoder:
        segs = [Segment(s["id"], s["source"], s["kind"], s["start"], s["width"], tuple(s["categories"]))
                for s in d["segments"]]
        encs = {k: ContinuousEncoding.from_dict(v) for k, v in d["encodings"].items()}
        return cls(TableSchema.from_dict(d["schema"]), rules, encs, segs)


def _as_array(v, continuous: bool) -> np.ndarray:
    return np.asarray(v, dtype=np.float64) if continuous else np.asarray(v, dtype=object)


def fit_encoder(table: DataTable, rules: RuleSet, seed: int, max_modes: int = 10,
                weight_threshold: float = 0.005) -> RowEncoder:
    """Fit mixtures for every continuous column of a masked table and build the layout."""
    encs = {}
    for i, c in enumerate(table.schema.continuous()):
        sub = int(np.random.default_rng([seed, i]).integers(2**31))
        encs[c.name] = fit_continuous_gmm(table[c.name], max_modes, weight_threshold, seed=sub, column=c.name)
    return RowEncoder(table.schema, rules, encs)


# ---------------------------------------------------------------------------
# training-by-sampling


class CondSampler:
    """Chooses a selectable segment uniformly, then a category by log-frequency."""

    def __init__(self, encoder: RowEncoder, encoded: np.ndarray, log_frequency: bool = True):
        self.encoder = encoder
        self.segments = [s for s in encoder.cond_segments]
        if not self.segments:
            raise EncodingError("layout has no selectable segments")
        self.probs = []
        self.rows = []
        for s in self.segments:
            block = encoded[:, s.start:s.stop]
            hits = block.argmax(axis=1)
            counts = np.bincount(hits, minlength=s.width).astype(np.float64)
            w = np.log1p(counts) if log_frequency else counts
            self.probs.append(w / w.sum())
            self.rows.append([np.flatnonzero(hits == j) for j in range(s.width)])

    def category_probs(self, source: str) -> np.ndarray:
        for s, p in zip(self.segments, self.probs):
            if s.source == source:
                return p
        raise KeyError(source)

    def sample(self, batch: int, rng: np.random.Generator, with_rows: bool = True):
        """Return (cond indices, matching real row indices or None)."""
        seg_idx = rng.integers(len(self.segments), size=batch)
        u_cat = rng.random(batch)
        u_row = rng.random(batch)
        conds = np.empty(batch, dtype=np.int64)
        rows = np.empty(batch, dtype=np.int64) if with_rows else None
        for i, s in enumerate(self.segments):
            pos = np.flatnonzero(seg_idx == i)
            if pos.size == 0:
                continue
            cum = np.cumsum(self.probs[i])
            cats = np.minimum(np.searchsorted(cum, u_cat[pos] * cum[-1], side="right"), s.width - 1)
            conds[pos] = self.encoder.cond_offsets[s.source] + cats
            if with_rows:
                for j in np.unique(cats):
                    pool = self.rows[i][j]
                    assert len(pool) > 0, "selected category has no matching rows"
                    at = pos[cats == j]
                    rows[at] = pool[np.minimum((u_row[at] * len(pool)).astype(np.int64), len(pool) - 1)]
        return conds, rows


def sample_condition(sampler: CondSampler, seed: int) -> tuple[np.ndarray, int]:
    """Single cond vector plus a real row index that satisfies it."""
    conds, rows = sampler.sample(1, np.random.default_rng(seed))
    return sampler.encoder.cond_vectors(conds)[0], int(rows[0])
