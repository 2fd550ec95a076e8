"""End-to-end fit/sample over raw tables, plus the self-describing model container."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamSet
from .encoder import RowEncoder, fit_encoder
from .gan import TrainingConfig, TrainState, sample_synthetic, substream, train
from .knowledge import RuleError, RuleSet, apply_property_masks, check_training_rows, validate_ruleset
from .privacy import AccountantState
from .schema import DataTable, TableSchema

FORMAT = "kgsynth-model"
FORMAT_VERSION = 1


class ArtifactError(ValueError):
    pass


class FingerprintError(ArtifactError):
    pass


@dataclass
class FittedModel:
    schema: TableSchema  # raw training schema
    rules: RuleSet
    encoder: RowEncoder
    state: TrainState

    @property
    def budget_exhausted(self) -> bool:
        return self.state.status == "budget_exhausted"


def prepare_training_table(table: DataTable, rules: RuleSet, rule_policy: str = "error") -> DataTable:
    """Validate the rule set against the raw table, apply masks and check rule consistency."""
    report = validate_ruleset(rules, table.schema, table)
    if not report.ok:
        raise RuleError("invalid rule set: " + "; ".join(i.message for i in report.issues))
    masked = apply_property_masks(table, rules)
    check_training_rows(masked, rules, rule_policy)
    return masked


def fit_model(table: DataTable, rules: RuleSet, config: TrainingConfig, rule_policy: str = "error",
              callback=None) -> FittedModel:
    masked = prepare_training_table(table, rules, rule_policy)
    enc_seed = int(substream(config.seed, "encoder").integers(2**31))
    encoder = fit_encoder(masked, rules, enc_seed)
    state = train(masked, encoder, config, callback)
    return FittedModel(table.schema, rules, encoder, state)


def sample_model(model: FittedModel, n: int, seed: int) -> DataTable:
    """n rows in the raw column vocabulary."""
    return sample_synthetic(model.state, model.encoder, n, seed)


# ---------------------------------------------------------------------------
# persistence


def _pack(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "f64le": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["f64le"]), dtype="<f8").reshape(d["shape"]).copy()


def _pack_params(p: ParamSet) -> list:
    return [[k, _pack(v)] for k, v in p.items()]


def _unpack_params(items: list) -> ParamSet:
    return ParamSet((k, _unpack(v)) for k, v in items)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def model_sections(model: FittedModel) -> dict:
    st = model.state
    return {
        "schema": model.schema.to_dict(),
        "rules": model.rules.to_dict(),
        "rules_sha256": model.rules.digest(),
        "encoder": model.encoder.to_dict(),
        "config": st.config.to_dict(),
        "generator": _pack_params(st.generator),
        "critic": _pack_params(st.critic),
        "accountant": st.accountant.to_dict() if st.accountant is not None else None,
        "training": {"epoch": st.epoch, "step": st.step, "critic_steps": st.critic_steps, "status": st.status,
                     "epsilon": st.epsilon, "cond_counts": st.cond_counts},
        "history": [{k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in h.items()}
                    for h in st.history],
    }


def fingerprint(sections: dict) -> str:
    return hashlib.sha256(_canonical(sections)).hexdigest()


def save_model(model: FittedModel, path: str | Path) -> str:
    sections = model_sections(model)
    fp = fingerprint(sections)
    doc = {"format": FORMAT, "version": FORMAT_VERSION, "fingerprint": fp, "sections": sections}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return fp


def load_model(path: str | Path) -> FittedModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FingerprintError(f"{path}: unreadable model container ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ArtifactError(f"{path}: not a {FORMAT} container")
    if doc.get("version") != FORMAT_VERSION:
        raise ArtifactError(f"{path}: container version {doc.get('version')!r} is not supported "
                            f"(expected {FORMAT_VERSION})")
    sections = doc.get("sections")
    try:
        fp = fingerprint(sections)
    except (TypeError, ValueError) as exc:
        raise FingerprintError(f"{path}: sections cannot be fingerprinted ({exc})") from None
    if fp != doc.get("fingerprint"):
        raise FingerprintError(f"{path}: fingerprint mismatch; the file was modified or corrupted")
    rules = RuleSet.from_dict(sections["rules"])
    if rules.digest() != sections["rules_sha256"]:
        raise FingerprintError(f"{path}: rule-set hash mismatch")
    encoder = RowEncoder.from_dict(sections["encoder"], rules)
    tr = sections["training"]
    acc = sections["accountant"]
    history = [{k: (float("nan") if v is None else v) for k, v in h.items()} for h in sections["history"]]
    state = TrainState(
        config=TrainingConfig.from_dict(sections["config"]),
        generator=_unpack_params(sections["generator"]),
        critic=_unpack_params(sections["critic"]),
        epoch=tr["epoch"], step=tr["step"], critic_steps=tr["critic_steps"],
        accountant=AccountantState.from_dict(acc) if acc is not None else None,
        epsilon=tr["epsilon"], history=history, status=tr["status"], cond_counts=tr["cond_counts"],
    )
    return FittedModel(TableSchema.from_dict(sections["schema"]), rules, encoder, state)
