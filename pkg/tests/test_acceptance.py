"""End-to-end acceptance checks, one test per criterion."""
import time
from pathlib import Path

import numpy as np
import pytest

from kgsynth import autodiff as ad
from kgsynth import gan
from kgsynth.cli import main
from kgsynth.encoder import fit_encoder
from kgsynth.evaluation.attacks import AttackConfig, attribute_inference, membership_inference
from kgsynth.evaluation.fidelity import (chi2_avg_p, chi2_sf, ks_avg_p, pmse_score, regression_metrics)
from kgsynth.evaluation.predictors import DEFAULT_SPECS, PredictorSpec
from kgsynth.evaluation.utility import classifier_utility
from kgsynth.fixtures import load_adult, mini_network
from kgsynth.gan import Critic, TrainingConfig, critic_loss, gradient_penalty
from kgsynth.knowledge import apply_property_masks, check_compliance
from kgsynth.pipeline import fit_model, sample_model
from kgsynth.privacy import DEFAULT_ORDERS, DpConfig, aggregate_noisy, epsilon_for, rdp_subsampled_gaussian
from kgsynth.schema import DataTable, split_train_holdout
from oracles import central_fd, chi2_pvalue, epsilon_from_rdp, leaky_critic_loss, numpy_mlp, rdp_quadrature, rel_err
from test_encoder import cond_sampler_tv
from test_evaluation import independent_synth, with_independent_column

ADULT = str(Path(__file__).resolve().parents[1] / "data" / "adult.data")
# desk-scale GAN settings shared by the training criteria
DESK = dict(batch_size=200, lr=1e-3, generator_hidden=(128, 128), critic_hidden=(128, 128))


def test_1_autodiff_gradients(criterion):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        sizes = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(2, 5)))] + [1]
        net = ad.MLP(sizes, "tanh")
        p = net.init(rng)
        x = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
        _, g = ad.value_and_grad(lambda P, x: ad.sum(ad.square(net.forward(P, x))), p, x)
        fd = central_fd(lambda flat: float(np.sum(numpy_mlp(p.unflatten(flat), x, "tanh") ** 2)), p.flatten())
        worst = max(worst, rel_err(g.flatten(), fd, floor=1e-8))
    criterion(1, worst <= 1e-5, f"100 MLPs, worst relative error {worst:.2e} (<= 1e-5)")
    assert worst <= 1e-5


def test_2_gradient_penalty(criterion):
    t, rules = mini_network(300, 0)
    m = apply_property_masks(t, rules)
    enc = fit_encoder(m, rules, 0)
    W = enc.total_width
    input_err = loss_err = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        critic = Critic(enc, hidden=(6, 5))
        P = critic.init(rng)
        real, fake = rng.normal(size=(4, W)), rng.normal(size=(4, W))
        cond = enc.cond_vectors(rng.integers(enc.cond_width, size=4))
        u = rng.random(4)
        x = np.concatenate([real, cond], axis=1)
        _, gx = critic.mlp.input_gradient(P.tensors(), ad.const(x))
        for b in range(4):
            fd = central_fd(lambda v: float(critic.mlp.forward(P.tensors(), ad.const(v[None])).data[0, 0]), x[b])
            input_err = max(input_err, rel_err(gx.data[b], fd))
        _, g = ad.value_and_grad(lambda Q: critic_loss(critic, Q, real, fake, cond, u, 10.0), P)
        ref = lambda flat: leaky_critic_loss({k[2:]: v for k, v in P.unflatten(flat).items()},
                                             real, fake, cond, u, 10.0, W)
        loss_err = max(loss_err, rel_err(g.flatten(), central_fd(ref, P.flatten())))
    rng = np.random.default_rng(9)
    lin = Critic(enc, hidden=())
    P = lin.init(rng)
    cond = enc.cond_vectors(rng.integers(enc.cond_width, size=6))
    gp = float(gradient_penalty(lin, P.tensors(), rng.normal(size=(6, W)), rng.normal(size=(6, W)), cond,
                                rng.random(6)).data)
    lin_err = abs(10.0 * gp - 10.0 * (np.linalg.norm(P["c.W0"][:W, 0]) - 1) ** 2)
    ok = input_err <= 1e-5 and loss_err <= 1e-4 and lin_err <= 1e-10
    criterion(2, ok, f"input grad {input_err:.1e} (<=1e-5), GP loss params {loss_err:.1e} (<=1e-4), "
                     f"linear closed form {lin_err:.1e} (<=1e-10)")
    assert ok


def test_3_dp_mechanics(criterion, monkeypatch):
    t, rules = mini_network(400, 0)
    C = 0.5
    worst, steps = [0.0], [0]
    real_clip = gan.clip_rows

    def spy(G, c):
        out, norms = real_clip(G, c)
        worst[0] = max(worst[0], float(np.linalg.norm(out, axis=1).max()))
        steps[0] += 1
        return out, norms

    monkeypatch.setattr(gan, "clip_rows", spy)
    dp = DpConfig(clip_norm=C, noise_multiplier=1.0, sampling_rate=0.1)
    model = fit_model(t, rules, TrainingConfig(seed=0, epochs=2, batch_size=100, noise_dim=16,
                                               generator_hidden=(32,), critic_hidden=(32,), dp=dp))
    clip_ok = worst[0] <= C * (1 + 1e-12) and steps[0] == model.state.critic_steps
    sigma, L = 1.3, 8.0
    draws = np.array([aggregate_noisy(np.zeros((8, 4)), C, sigma, L, seed=s) for s in range(10_000)])
    var_err = float(np.max(np.abs(draws.var(axis=0) / (sigma ** 2 * C ** 2 / L ** 2) - 1)))
    ok = clip_ok and var_err <= 0.05
    criterion(3, ok, f"max clipped norm {worst[0]:.6f} over {steps[0]} private steps (C={C}); "
                     f"noise variance rel. error {var_err:.3f} (<=0.05)")
    assert ok


def test_4_accountant(criterion):
    diff = 0.0
    for q in (0.01, 0.05, 0.2):
        for sigma in (0.8, 1.0, 2.0):
            per = [rdp_quadrature(q, sigma, a, dps=30) for a in DEFAULT_ORDERS]
            for T in (1, 100, 1000, 10_000):
                ref = epsilon_from_rdp([T * r for r in per], DEFAULT_ORDERS, 1e-5)
                diff = max(diff, abs(epsilon_for(q, sigma, T, 1e-5).epsilon - ref))
    closed = all(rdp_subsampled_gaussian(1.0, s, a) == a / (2 * s * s) for s in (0.5, 1.0, 3.0) for a in DEFAULT_ORDERS)
    eps_t = [epsilon_for(0.02, 1.0, T, 1e-5).epsilon for T in (1, 10, 100, 1000, 10_000)]
    eps_s = [epsilon_for(0.02, s, 1000, 1e-5).epsilon for s in (0.6, 0.8, 1.0, 2.0, 4.0)]
    mono = all(a < b for a, b in zip(eps_t, eps_t[1:])) and all(a > b for a, b in zip(eps_s, eps_s[1:]))
    ok = diff <= 1e-6 and closed and mono
    criterion(4, ok, f"max |eps - oracle| {diff:.1e} (<=1e-6); q=1 closed form exact: {closed}; monotone: {mono}")
    assert ok


def test_5_encoder(criterion):
    t, rules = mini_network(2000, 0)
    m = apply_property_masks(t, rules)
    enc = fit_encoder(m, rules, 0)
    E = enc.encode(m, 1)
    back = enc.decode(E, 2, materialize_masks=False)
    discrete_ok = all(np.array_equal(back[c.name], m[c.name]) for c in m.schema.discrete())
    worst = 0.0
    for name, e in enc.encodings.items():
        beta = enc.segment(name, "beta")
        k = E[:, beta.start:beta.stop].argmax(axis=1)
        worst = max(worst, float(np.max(np.abs(back[name] - m[name]) / (4 * np.asarray(e.stds)[k]))))
    tv = cond_sampler_tv(enc, E)
    ok = discrete_ok and worst <= 1e-6 and tv <= 0.02
    criterion(5, ok, f"discrete exact: {discrete_ok}; continuous error {worst:.1e} x 4phi (<=1e-6); "
                     f"cond sampler TV {tv:.4f} (<=0.02)")
    assert ok


def marginal_tv(a, b, columns):
    return max(0.5 * sum(abs(np.mean(a[c] == k) - np.mean(b[c] == k)) for k in set(a[c]) | set(b[c]))
               for c in columns)


@pytest.mark.slow
def test_6_rule_infusion(criterion):
    start = time.perf_counter()
    rows = []
    for seed in range(3):
        t, rules = mini_network(2000, seed)
        masked = apply_property_masks(t, rules)
        res = {}
        for w in (10.0, 0.0):
            model = fit_model(t, rules, TrainingConfig(seed=seed, epochs=60, rule_weight=w, **DESK))
            out = apply_property_masks(sample_model(model, 2000, seed + 100), rules)
            res[w] = (check_compliance(out, rules).rate, marginal_tv(masked, out, ("protocol", "port_group", "src_zone")))
        rows.append(res)
    elapsed = time.perf_counter() - start
    comp_ok = all(r[10.0][0] >= 0.95 for r in rows)
    wins = sum(r[10.0][0] > r[0.0][0] for r in rows)
    tv_ok = all(r[10.0][1] <= 0.15 for r in rows)
    ok = comp_ok and wins >= 2 and tv_ok and elapsed <= 600
    detail = "; ".join(f"seed {i}: w10 {r[10.0][0]:.4f} (TV {r[10.0][1]:.3f}) vs w0 {r[0.0][0]:.4f}"
                       for i, r in enumerate(rows))
    criterion(6, ok, f"{detail}; w10 ahead in {wins}/3; {elapsed:.0f}s (<=600)")
    assert ok


def test_7_metric_identities(criterion):
    net = mini_network(1000, 0)[0]
    adult, _ = load_adult(ADULT, 2000, 0)
    p = pmse_score(net, net).pmse
    chi, ks = chi2_avg_p(net, net), ks_avg_p(net, net)
    reg = regression_metrics(adult, adult, "income")
    train, hold = split_train_holdout(adult, 0.3, 0)
    gaps = [r.gap for r in classifier_utility(train, train, hold, "income", DEFAULT_SPECS).rows]
    chi_err = max(abs(chi2_sf(x, df) - chi2_pvalue(x, df)) for df in range(1, 21)
                  for x in (0.1, 0.5, 1, 2, 5, 10, 20, 35, 50))
    ok = (p <= 0.01 and chi >= 0.9 and ks >= 0.9 and reg.ci_overlap_mean >= 0.99 and reg.std_diff_mean <= 0.05
          and all(g == 0 for g in gaps) and chi_err <= 1e-8)
    criterion(7, ok, f"pmse {p:.4f}, chi2 p {chi:.3f}, KS p {ks:.3f}, IO {reg.ci_overlap_mean:.3f}, "
                     f"std_diff {reg.std_diff_mean:.3f}, gaps {gaps}, chi2 oracle error {chi_err:.1e}")
    assert ok


def test_8_attack_sanity(criterion):
    accs = [membership_inference(AttackConfig(seed=s), independent_synth, mini_network(1600, 100 + s)[0]).accuracy
            for s in range(5)]
    copy = membership_inference(AttackConfig(seed=0), lambda t, s: t, mini_network(1600, 7)[0]).accuracy
    orig = with_independent_column(mini_network(1000, 0)[0], 1)
    syn = with_independent_column(mini_network(1000, 2)[0], 3)
    aia = attribute_inference(AttackConfig(mode="aia"), syn, orig, "secret")
    ok = all(abs(a - 0.5) <= 0.05 for a in accs) and copy >= 0.9 and abs(aia.accuracy - aia.majority_rate) <= 0.05
    criterion(8, ok, f"independent MIA {[round(a, 4) for a in accs]}; verbatim-copy MIA {copy:.3f}; "
                     f"AIA {aia.accuracy:.3f} vs majority {aia.majority_rate:.3f}")
    assert ok


@pytest.mark.slow
def test_9_adult_desk_run(criterion):
    start = time.perf_counter()
    table, rules = load_adult(ADULT, 10_000, 0)
    train, hold = split_train_holdout(table, 0.2, 0)
    cfg = TrainingConfig(seed=0, epochs=30, rule_weight=10.0, **{**DESK, "batch_size": 500})
    model = fit_model(train, rules, cfg, rule_policy="warn")
    syn = DataTable(train.schema, dict(sample_model(model, train.row_count, 1).data))
    row = classifier_utility(train, syn, hold, "income", [PredictorSpec("cart")]).rows[0]

    def synthesize(members, seed):
        c = TrainingConfig(seed=seed, epochs=30, rule_weight=10.0, **{**DESK, "batch_size": 100})
        fitted = fit_model(members, rules, c, rule_policy="warn")
        return DataTable(members.schema, dict(sample_model(fitted, members.row_count, seed).data))

    mia = membership_inference(AttackConfig(members=500, shadows=3, seed=0), synthesize, table).accuracy
    elapsed = time.perf_counter() - start
    ok = row.gap <= 0.10 and mia <= 0.55 and elapsed <= 1800
    criterion(9, ok, f"CART real {row.acc_real:.4f} synth {row.acc_synth:.4f} gap {row.gap:.4f} (<=0.10); "
                     f"MIA {mia:.4f} (<=0.55); {elapsed:.0f}s (<=1800)")
    assert ok


def run_cli_pipeline(d):
    fast = ["--epochs", "3", "--batch", "100", "--hidden", "32,32", "--lr", "1e-3"]
    data, schema, rules = d / "net.csv", d / "net.schema.json", d / "net.rules.json"
    assert main(["fixture", "--out", str(data), "--rows", "500", "--seed", "4"]) == 0
    assert main(["fit", "--data", str(data), "--schema", str(schema), "--rules", str(rules),
                 "--model", str(d / "m.json"), "--seed", "4", *fast]) == 0
    assert main(["sample", "--model", str(d / "m.json"), "--out", str(d / "syn.csv"), "--rows", "300",
                 "--seed", "4"]) == 0
    assert main(["eval", "--data", str(data), "--synthetic", str(d / "syn.csv"), "--schema", str(schema),
                 "--report", str(d / "rep.json"), "--target", "protocol", "--metrics", "pmse,chi2,ks,utility",
                 "--seed", "4"]) == 0
    return (d / "syn.csv").read_bytes(), (d / "rep.json").read_text()


def test_10_determinism(criterion, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    csv_a, rep_a = run_cli_pipeline(tmp_path / "a")
    csv_b, rep_b = run_cli_pipeline(tmp_path / "b")
    ok = csv_a == csv_b and rep_a == rep_b
    criterion(10, ok, f"synthetic CSV identical: {csv_a == csv_b} ({len(csv_a)} bytes); report identical: {rep_a == rep_b}")
    assert ok
