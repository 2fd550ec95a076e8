"""Membership and attribute inference against a synthesizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..encoder import ContinuousEncoding, fit_continuous_gmm
from ..schema import DataTable, SchemaError
from .predictors import DecisionTree, FeatureEncoder, PredictorError, PredictorSpec, train_predictor

Synthesizer = Callable[[DataTable, int], DataTable]


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "mia"
    sensitive_column: str | None = None
    members: int = 200
    shadows: int = 3
    confidence_column: str | None = None
    attack_depth: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("mia", "aia"):
            raise AttackError("mode must be 'mia' or 'aia'")
        if self.shadows < 1:
            raise AttackError("shadow count must be >= 1")
        if self.members < 1:
            raise AttackError("member count must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# encoded-space distances


@dataclass
class DistanceEncoder:
    """Mode-normalised continuous slots (alpha unclamped) plus one-hots; a categorical mismatch costs sqrt 2."""

    encodings: dict[str, ContinuousEncoding]
    levels: dict[str, list[str]]
    columns: list[str]

    @classmethod
    def fit(cls, reference: DataTable, seed: int = 0) -> DistanceEncoder:
        encs, levels = {}, {}
        for c in reference.schema.columns:
            if c.is_continuous:
                encs[c.name] = fit_continuous_gmm(reference[c.name], seed=seed, column=c.name)
            else:
                levels[c.name] = sorted(set(reference[c.name].tolist()))
        return cls(encs, levels, reference.schema.names)

    def transform(self, table: DataTable) -> np.ndarray:
        blocks = []
        for name in self.columns:
            v = table[name]
            if name in self.encodings:
                e = self.encodings[name]
                k = e.responsibilities(np.asarray(v, dtype=np.float64)).argmax(axis=1)
                alpha = (v - np.asarray(e.means)[k]) / (4.0 * np.asarray(e.stds)[k])
                beta = np.zeros((len(v), e.n_modes))
                beta[np.arange(len(v)), k] = 1.0
                blocks += [alpha[:, None], beta]
            else:
                lookup = {x: i for i, x in enumerate(self.levels[name])}
                # an extra slot keeps unseen labels at distance sqrt 2 from every seen one
                M = np.zeros((len(v), len(lookup) + 1))
                M[np.arange(len(v)), [lookup.get(x, len(lookup)) for x in v]] = 1.0
                blocks.append(M)
        return np.concatenate(blocks, axis=1)


def distance_to_closest(candidates: np.ndarray, reference: np.ndarray, chunk: int = 1024) -> np.ndarray:
    if len(reference) == 0:
        return np.full(len(candidates), np.inf)
    sq = (reference ** 2).sum(axis=1)
    out = np.empty(len(candidates))
    for s in range(0, len(candidates), chunk):
        B = candidates[s:s + chunk]
        d2 = (B ** 2).sum(axis=1)[:, None] + sq[None] - 2.0 * B @ reference.T
        out[s:s + len(B)] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return out


# ---------------------------------------------------------------------------
# membership inference


@dataclass
class MiaResult:
    accuracy: float
    member_hit_rate: float
    nonmember_hit_rate: float
    config: dict = field(default_factory=dict)


def _attack_features(candidates: DataTable, synthetic: DataTable, dist: DistanceEncoder,
                     conf_col: str | None, seed: int) -> np.ndarray:
    dcr = distance_to_closest(dist.transform(candidates), dist.transform(synthetic))
    feats = [dcr]
    if conf_col is not None:
        try:
            pred = train_predictor(PredictorSpec("cart", seed=seed), synthetic, conf_col)
            feats.append(pred.true_label_confidence(candidates))
        except PredictorError:
            feats.append(np.zeros(candidates.row_count))
    return np.stack(feats, axis=1)


def membership_inference(config: AttackConfig, synthesize: Synthesizer, population: DataTable) -> MiaResult:
    """Shadow-calibrated attack on distance-to-closest-record and synthetic-model confidence.

    The population is cut into disjoint member/non-member pools for the target
    and for every shadow; each shadow synthesizer is trained on its members and
    the attack model learns member vs non-member from the shadows' features.
    """
    m = config.members
    need = 2 * m * (1 + config.shadows)
    if population.row_count < need:
        raise AttackError(f"population of {population.row_count} rows is too small; need {need} for disjoint pools")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(population.row_count)
    pools = [population.take(np.sort(order[i * m:(i + 1) * m])) for i in range(2 * (1 + config.shadows))]
    conf_col = config.confidence_column or population.schema.target
    dist = DistanceEncoder.fit(population, seed=config.seed)

    X_att, y_att = [], []
    for s in range(config.shadows):
        mem, non = pools[2 + 2 * s], pools[3 + 2 * s]
        syn = synthesize(mem, config.seed + 1000 + s)
        X_att += [_attack_features(mem, syn, dist, conf_col, config.seed),
                  _attack_features(non, syn, dist, conf_col, config.seed)]
        y_att += [np.ones(m, dtype=np.int64), np.zeros(m, dtype=np.int64)]
    attack = DecisionTree(config.attack_depth, min_samples_leaf=5, n_classes=2).fit(
        np.concatenate(X_att), np.concatenate(y_att))

    members, non_members = pools[0], pools[1]
    syn = synthesize(members, config.seed)
    pm = attack.predict(_attack_features(members, syn, dist, conf_col, config.seed))
    pn = attack.predict(_attack_features(non_members, syn, dist, conf_col, config.seed))
    tpr, tnr = float(pm.mean()), float(1.0 - pn.mean())
    return MiaResult(0.5 * (tpr + tnr), tpr, 1.0 - tnr, config.to_dict())


# ---------------------------------------------------------------------------
# attribute inference


@dataclass
class AiaResult:
    accuracy: float
    majority_rate: float
    sensitive: str


def attribute_inference(config: AttackConfig, synthetic: DataTable, original: DataTable,
                        sensitive: str | None = None) -> AiaResult:
    """CART trained on synthetic rows predicts the sensitive column of original rows from all others."""
    col = sensitive or config.sensitive_column
    if col is None:
        raise AttackError("attribute inference needs a sensitive column")
    if col not in original.schema:
        raise SchemaError(f"unknown sensitive column {col!r}")
    if original.schema.column(col).is_continuous:
        raise AttackError(f"sensitive column {col!r} is continuous; only discrete targets are supported")
    pred = train_predictor(PredictorSpec("cart", seed=config.seed), synthetic, col,
                           FeatureEncoder.fit(synthetic, exclude=[col]))
    acc = pred.accuracy(original)
    _, counts = np.unique(original[col], return_counts=True)
    return AiaResult(acc, float(counts.max() / counts.sum()), col)
