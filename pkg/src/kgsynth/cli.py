"""Command-line entry point: fixture, fit, sample, eval, attack, accountant."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .evaluation import AttackConfig, attribute_inference, evaluate, membership_inference
from .evaluation.attacks import AttackError
from .evaluation.fidelity import MetricError
from .evaluation.predictors import PredictorError
from .fixtures import builtin_fixture, load_adult
from .gan import TrainingConfig, export_history
from .knowledge import MaskError, RuleError, RuleSet
from .pipeline import ArtifactError, FingerprintError, fit_model, load_model, sample_model, save_model
from .privacy import DEFAULT_ORDERS, AccountantState, DpConfig, account_step, report_epsilon, solve_noise_multiplier
from .schema import DataError, DataTable, SchemaError, TableSchema, load_csv, split_train_holdout

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BUDGET, EXIT_FINGERPRINT = 0, 2, 3, 4, 5

log = logging.getLogger("kgsynth")


class ConfigError(ValueError):
    pass


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ConfigError(f"--{n.replace('_', '-')} is required for '{args.verb}'")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def _load_table(args, path: str | None = None) -> DataTable:
    path = path or args.data
    schema = TableSchema.load(_existing(args.schema, "schema"))
    return load_csv(_existing(path, "data"), schema)


# ---------------------------------------------------------------------------
# verbs


def cmd_fixture(args) -> int:
    _need(args, "out")
    if args.name == "adult":
        _need(args, "data")
        table, rules = load_adult(_existing(args.data, "data"), args.rows, args.seed)
    else:
        table, rules = builtin_fixture(args.name, args.rows or 2000, args.seed)
    table.to_csv(args.out)
    schema_path = Path(args.schema or Path(args.out).with_suffix(".schema.json"))
    rules_path = Path(args.rules or Path(args.out).with_suffix(".rules.json"))
    # categories of the raw columns are re-inferred on load; save the open schema
    open_schema = TableSchema(tuple(c if c.masked_by else type(c)(c.name, c.kind) for c in table.schema.columns),
                              table.schema.target, table.schema.sensitive)
    open_schema.save(schema_path)
    rules.save(rules_path)
    print(f"wrote {table.row_count} rows to {args.out}; schema {schema_path}; rules {rules_path}")
    return EXIT_OK


def _training_config(args, n_rows: int) -> TrainingConfig:
    dp = None
    if args.dp:
        q = min(1.0, args.batch / n_rows)
        sigma = args.sigma
        if sigma is None:
            if args.epsilon_ceiling is None:
                raise ConfigError("--dp needs --sigma or --epsilon-ceiling")
            steps = args.epochs * max(1, n_rows // args.batch) * args.n_critic
            sigma = solve_noise_multiplier(q, steps, args.delta, args.epsilon_ceiling)
            log.info("solved noise multiplier sigma=%.4f", sigma)
        dp = DpConfig(args.clip, sigma, q, args.delta, args.epsilon_ceiling)
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else (256, 256)
    return TrainingConfig(epochs=args.epochs, batch_size=args.batch, n_critic=args.n_critic,
                          rule_weight=args.rule_weight, lr=args.lr, generator_hidden=hidden, critic_hidden=hidden,
                          seed=args.seed, dp=dp)


def cmd_fit(args) -> int:
    _need(args, "data", "schema", "rules", "model")
    rules = RuleSet.load(_existing(args.rules, "rules"))
    table = _load_table(args)
    cfg = _training_config(args, table.row_count)
    model = fit_model(table, rules, cfg, args.rule_policy)
    fp = save_model(model, args.model)
    if args.history:
        export_history(model.state, args.history)
    st = model.state
    last = st.history[-1] if st.history else {}
    print(f"status: {st.status}")
    print(f"steps: {st.step} generator, {st.critic_steps} critic")
    for k in ("critic_loss", "generator_loss", "rule_loss"):
        if k in last:
            print(f"final {k}: {last[k]:.6f}")
    if st.epsilon is not None:
        print(f"epsilon: {st.epsilon:.6f} (delta={cfg.dp.delta})")
    print(f"fingerprint: {fp}")
    return EXIT_BUDGET if model.budget_exhausted else EXIT_OK


def cmd_sample(args) -> int:
    _need(args, "model", "out")
    model = load_model(_existing(args.model, "model"))
    rows = 1000 if args.rows is None else args.rows
    if rows < 0:
        raise ConfigError("--rows must be >= 0")
    sample_model(model, rows, args.seed).to_csv(args.out)
    print(f"wrote {rows} rows to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _need(args, "data", "synthetic", "schema", "report")
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    if ("regression" in metrics or "utility" in metrics) and args.target is None:
        raise ConfigError("--target is required when regression or utility metrics are requested")
    original = _load_table(args)
    synthetic = _load_table(args, args.synthetic)
    holdout = _load_table(args, args.holdout) if args.holdout else None
    if "utility" in metrics and holdout is None:
        original, holdout = split_train_holdout(original, 0.2, args.seed)
    _align(original, synthetic)
    if holdout is not None:
        holdout = _conform(holdout, original.schema)
    rep = evaluate(original, _conform(synthetic, original.schema), args.target, holdout, args.seed, metrics=metrics)
    rep.save(args.report)
    print(rep.summary())
    return EXIT_OK


def _align(a: DataTable, b: DataTable) -> None:
    if a.schema.names != b.schema.names:
        raise SchemaError(f"incompatible schemas: {a.schema.names} vs {b.schema.names}")


def _conform(t: DataTable, schema: TableSchema) -> DataTable:
    """Give ``t`` the reference schema (categories inferred per file can differ)."""
    return DataTable(schema, dict(t.data))


def cmd_attack(args) -> int:
    _need(args, "data", "schema", "report")
    population = _load_table(args)
    if args.mode == "aia":
        _need(args, "synthetic")
        sensitive = args.sensitive or (population.schema.sensitive[0] if population.schema.sensitive else None)
        if sensitive is None:
            raise ConfigError("--sensitive is required for attribute inference")
        synthetic = _conform(_load_table(args, args.synthetic), population.schema)
        res = attribute_inference(AttackConfig("aia", sensitive, seed=args.seed), synthetic, population, sensitive)
        out = {"mode": "aia", "accuracy": res.accuracy, "majority_rate": res.majority_rate,
               "sensitive": res.sensitive, "seed": args.seed}
    else:
        _need(args, "rules")
        rules = RuleSet.load(_existing(args.rules, "rules"))
        cfg = _training_config(args, args.members)

        def synthesize(members: DataTable, seed: int) -> DataTable:
            c = TrainingConfig.from_dict({**cfg.to_dict(), "seed": seed})
            model = fit_model(members, rules, c, args.rule_policy)
            return _conform(sample_model(model, members.row_count, seed), members.schema)

        conf = AttackConfig("mia", members=args.members, shadows=args.shadows, seed=args.seed)
        res = membership_inference(conf, synthesize, population)
        out = {"mode": "mia", "accuracy": res.accuracy, "member_hit_rate": res.member_hit_rate,
               "nonmember_hit_rate": res.nonmember_hit_rate, "protocol": res.config,
               "training": cfg.to_dict()}
    Path(args.report).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{out['mode']} accuracy: {out['accuracy']:.4f}")
    return EXIT_OK


def cmd_accountant(args) -> int:
    _need(args, "sampling_rate", "sigma", "steps")
    if not 0 <= args.sampling_rate <= 1 or args.sigma <= 0 or args.steps < 0 or not 0 < args.delta < 1:
        raise ConfigError("need 0 <= q <= 1, sigma > 0, steps >= 0 and 0 < delta < 1")
    orders = tuple(float(o) for o in args.orders.split(",")) if args.orders else DEFAULT_ORDERS
    if any(o <= 1 for o in orders):
        raise ConfigError("RDP orders must exceed 1")
    state = AccountantState(orders)
    if args.steps:
        state = account_step(state, args.sampling_rate, args.sigma, args.steps)
    rep = report_epsilon(state, args.delta)
    if rep.no_steps:
        print("epsilon: 0 (no steps)")
    else:
        print(f"epsilon: {rep.epsilon!r}")
        print(f"order: {rep.order!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgsynth", description="Rule-aware conditional GAN for tabular data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, *flags):
        table = {
            "data": dict(help="input CSV"), "schema": dict(help="schema JSON"), "rules": dict(help="rules JSON"),
            "model": dict(help="model container path"), "out": dict(help="output path"),
            "report": dict(help="report JSON path"),
        }
        for f in flags:
            sp.add_argument(f"--{f}", **table[f])
        sp.add_argument("--seed", type=int, required=True, help="master seed (mandatory)")

    def training(sp):
        sp.add_argument("--epochs", type=int, default=300)
        sp.add_argument("--batch", type=int, default=500)
        sp.add_argument("--n-critic", type=int, default=5)
        sp.add_argument("--lr", type=float, default=2e-4)
        sp.add_argument("--hidden", help="comma-separated hidden widths, e.g. 256,256")
        sp.add_argument("--rule-weight", type=float, default=1.0)
        sp.add_argument("--rule-policy", choices=("error", "warn"), default="error")
        sp.add_argument("--dp", action="store_true")
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--clip", type=float, default=1.0)
        sp.add_argument("--delta", type=float, default=1e-5)
        sp.add_argument("--epsilon-ceiling", type=float)

    sp = sub.add_parser("fixture", help="write a built-in dataset with its schema and rules")
    common(sp, "out", "schema", "rules", "data")
    sp.add_argument("--name", choices=("mini_network", "adult"), default="mini_network")
    sp.add_argument("--rows", type=int)

    sp = sub.add_parser("fit", help="train a model")
    common(sp, "data", "schema", "rules", "model")
    training(sp)
    sp.add_argument("--history", help="write the loss history CSV here")

    sp = sub.add_parser("sample", help="draw synthetic rows from a model")
    common(sp, "model", "out")
    sp.add_argument("--rows", type=int)

    sp = sub.add_parser("eval", help="compare a synthetic table with the original")
    common(sp, "data", "schema", "report")
    sp.add_argument("--synthetic")
    sp.add_argument("--holdout")
    sp.add_argument("--target")
    sp.add_argument("--metrics", default="pmse,chi2,ks,regression,utility")

    sp = sub.add_parser("attack", help="membership or attribute inference")
    common(sp, "data", "schema", "rules", "report")
    training(sp)
    sp.add_argument("--mode", choices=("mia", "aia"), default="mia")
    sp.add_argument("--synthetic")
    sp.add_argument("--sensitive")
    sp.add_argument("--members", type=int, default=200)
    sp.add_argument("--shadows", type=int, default=3)

    sp = sub.add_parser("accountant", help="epsilon of the Poisson-subsampled Gaussian mechanism")
    sp.add_argument("--sampling-rate", "--q", dest="sampling_rate", type=float)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--delta", type=float, default=1e-5)
    sp.add_argument("--orders", help="comma-separated RDP orders (default: built-in grid)")
    return p


VERBS = {"fixture": cmd_fixture, "fit": cmd_fit, "sample": cmd_sample, "eval": cmd_eval,
         "attack": cmd_attack, "accountant": cmd_accountant}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return VERBS[args.verb](args)
    except FingerprintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (ConfigError, ArtifactError, RuleError, MaskError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError, MetricError, AttackError, PredictorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
