"""EvalReport: one versioned JSON document per evaluation run."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..schema import DataTable
from .fidelity import chi2_avg_p, ks_avg_p, pmse_score, regression_metrics
from .predictors import DEFAULT_SPECS
from .utility import classifier_utility

REPORT_VERSION = 1


def table_digest(table: DataTable) -> str:
    return hashlib.sha256(table.to_csv().encode()).hexdigest()


def _clean(x):
    """JSON-safe: non-finite floats become None, tuples become lists."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


@dataclass
class EvalReport:
    pmse: float | None = None
    pmse_ratio: float | None = None
    chi2_avg_p: float | None = None
    ks_avg_p: float | None = None
    ci_overlap_mean: float | None = None
    std_diff_mean: float | None = None
    coefficients: list[dict] = field(default_factory=list)
    classifiers: list[dict] = field(default_factory=list)
    utility_gap_mean: float | None = None
    utility_gap_std: float | None = None
    mia_accuracy: float | None = None
    aia_accuracy: float | None = None
    metadata: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return _clean(dict(self.__dict__))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')!r}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> EvalReport:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def summary(self) -> str:
        def f(v):
            return "n/a" if v is None else f"{v:.4f}"
        d = self.to_dict()
        lines = [f"{k:>18}: {f(d[k])}" for k in ("pmse", "pmse_ratio", "chi2_avg_p", "ks_avg_p",
                                                  "ci_overlap_mean", "std_diff_mean", "utility_gap_mean",
                                                  "mia_accuracy", "aia_accuracy")]
        for c in d["classifiers"]:
            lines.append(f"{c['kind']:>18}: real {f(c['acc_real'])}  synth {f(c['acc_synth'])}  gap {f(c['gap'])}")
        return "\n".join(lines)


def evaluate(original: DataTable, synthetic: DataTable, target: str | None = None,
             holdout: DataTable | None = None, seed: int = 0, specs=DEFAULT_SPECS,
             metrics=("pmse", "chi2", "ks", "regression", "utility")) -> EvalReport:
    """Run the selected fidelity and utility metrics of ``synthetic`` against ``original``."""
    rep = EvalReport(metadata={"original_sha256": table_digest(original), "synthetic_sha256": table_digest(synthetic),
                               "seed": seed, "metrics": list(metrics), "target": target,
                               "rows": [original.row_count, synthetic.row_count]})
    if "pmse" in metrics:
        p = pmse_score(original, synthetic, seed=seed)
        rep.pmse, rep.pmse_ratio = p.pmse, p.ratio
    if "chi2" in metrics and original.schema.discrete():
        rep.chi2_avg_p = chi2_avg_p(original, synthetic)
    if "ks" in metrics and original.schema.continuous():
        rep.ks_avg_p = ks_avg_p(original, synthetic)
    if "regression" in metrics or "utility" in metrics:
        if target is None:
            raise ValueError("--target is required for regression/utility metrics")
    if "regression" in metrics:
        r = regression_metrics(original, synthetic, target)
        rep.ci_overlap_mean, rep.std_diff_mean = r.ci_overlap_mean, r.std_diff_mean
        rep.coefficients = [c.to_dict() for c in r.coefficients]
    if "utility" in metrics:
        if holdout is None:
            raise ValueError("utility metrics need a real holdout table")
        u = classifier_utility(original, synthetic, holdout, target, specs)
        rep.classifiers = [row.to_dict() for row in u.rows]
        rep.utility_gap_mean, rep.utility_gap_std = u.gap_mean, u.gap_std
        rep.metadata["holdout_sha256"] = table_digest(holdout)
    return rep
