"""Train-on-synthetic / test-on-real classifier comparison."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..schema import DataTable
from .predictors import DEFAULT_SPECS, FeatureEncoder, PredictorError, PredictorSpec, train_predictor


@dataclass
class UtilityRow:
    kind: str
    acc_real: float | None
    acc_synth: float | None
    gap: float | None
    flagged: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class UtilityResult:
    rows: list[UtilityRow]
    gap_mean: float
    gap_std: float


def classifier_utility(original_train: DataTable, synthetic_train: DataTable, holdout: DataTable,
                       target: str, specs=DEFAULT_SPECS) -> UtilityResult:
    """Each spec trained on both tables with the same seed and scored on the shared real holdout."""
    feats = FeatureEncoder.fit(original_train, exclude=[target])
    classes = set(original_train[target].tolist())
    rows = []
    for spec in specs:
        spec = spec if isinstance(spec, PredictorSpec) else PredictorSpec(spec)
        missing = classes - set(synthetic_train[target].tolist())
        if missing:
            rows.append(UtilityRow(spec.kind, None, None, None, f"classes absent from synthetic: {sorted(missing)}"))
            continue
        try:
            real = train_predictor(spec, original_train, target, feats)
            syn = train_predictor(spec, synthetic_train, target, feats)
        except PredictorError as exc:
            rows.append(UtilityRow(spec.kind, None, None, None, str(exc)))
            continue
        a_r, a_s = real.accuracy(holdout), syn.accuracy(holdout)
        rows.append(UtilityRow(spec.kind, a_r, a_s, a_r - a_s))
    gaps = [r.gap for r in rows if r.gap is not None]
    return UtilityResult(rows, float(np.mean(gaps)) if gaps else float("nan"),
                         float(np.std(gaps)) if gaps else float("nan"))
