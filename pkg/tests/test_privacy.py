import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgsynth.privacy import (DEFAULT_ORDERS, Accountant, AccountantState, DpConfig, account_step, aggregate_noisy,
                             clip_per_example, clip_rows, epsilon_for, rdp_subsampled_gaussian, rdp_vector,
                             report_epsilon, solve_noise_multiplier)
from oracles import epsilon_from_rdp, rdp_quadrature

GRID_Q = (0.01, 0.1)
GRID_SIGMA = (0.8, 1.0, 2.0)
GRID_T = (1, 100, 1000)


def test_clip_examples():
    c = clip_per_example([3.0, 4.0], 1.0)
    assert np.allclose(c.vector, [0.6, 0.8]) and c.original_norm == 5.0
    assert np.allclose(clip_per_example([0.3, 0.4], 1.0).vector, [0.3, 0.4])
    assert np.allclose(clip_per_example([0.0, 0.0], 1.0).vector, 0.0)
    with pytest.raises(ValueError):
        clip_per_example([1.0], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.floats(1e-3, 10))
def test_clipped_norm_never_exceeds_bound(g, c):
    assert np.linalg.norm(clip_per_example(g, c).vector) <= c * (1 + 1e-12)


def test_clip_rows_matches_single_clip():
    G = np.random.default_rng(0).normal(size=(20, 5)) * 3
    out, norms = clip_rows(G, 1.5)
    for i in range(20):
        assert np.allclose(out[i], clip_per_example(G[i], 1.5).vector)
    assert np.allclose(norms, np.linalg.norm(G, axis=1))


def test_noisy_aggregate_without_noise_is_mean():
    rows = np.arange(6.0).reshape(3, 2)
    assert np.allclose(aggregate_noisy(rows, 1.0, 0.0), rows.mean(axis=0))


def test_noisy_aggregate_variance():
    sigma, C, L = 1.3, 0.7, 4.0
    rows = np.zeros((4, 3))
    draws = np.array([aggregate_noisy(rows, C, sigma, L, seed=s) for s in range(10_000)])
    expected = sigma ** 2 * C ** 2 / L ** 2
    assert np.all(np.abs(draws.var(axis=0) / expected - 1) <= 0.05)


def test_full_batch_closed_form():
    for a in DEFAULT_ORDERS:
        assert rdp_subsampled_gaussian(1.0, 1.7, a) == a / (2 * 1.7 ** 2)


def test_zero_sampling_is_free():
    assert rdp_subsampled_gaussian(0.0, 1.0, 8) == 0.0


def test_rdp_matches_arbitrary_precision_oracle():
    for q in GRID_Q:
        for s in GRID_SIGMA:
            for a in DEFAULT_ORDERS:
                ref = rdp_quadrature(q, s, a, dps=30)
                assert rdp_subsampled_gaussian(q, s, a) == pytest.approx(ref, rel=1e-8, abs=1e-14)


def test_epsilon_matches_oracle_over_grid():
    for q in GRID_Q:
        for s in GRID_SIGMA:
            per = [rdp_quadrature(q, s, a, dps=30) for a in DEFAULT_ORDERS]
            for T in GRID_T:
                ref = epsilon_from_rdp([T * r for r in per], DEFAULT_ORDERS, 1e-5)
                assert abs(epsilon_for(q, s, T, 1e-5).epsilon - ref) <= 1e-6


def test_frozen_reference_value():
    # q=0.01, sigma=1, 1000 steps, delta=1e-5; computed once with the oracle above
    rep = epsilon_for(0.01, 1.0, 1000, 1e-5)
    assert rep.epsilon == pytest.approx(2.538347545458931, abs=1e-9)
    assert rep.order == 8


def test_no_steps_reports_zero():
    rep = report_epsilon(AccountantState(), 1e-5)
    assert rep.epsilon == 0.0 and rep.no_steps


def test_monotone_in_steps_and_antitone_in_sigma():
    eps_t = [epsilon_for(0.02, 1.1, T, 1e-5).epsilon for T in (1, 10, 100, 1000, 5000)]
    assert all(a < b for a, b in zip(eps_t, eps_t[1:]))
    eps_s = [epsilon_for(0.02, s, 500, 1e-5).epsilon for s in (0.6, 0.9, 1.5, 3.0, 8.0)]
    assert all(a > b for a, b in zip(eps_s, eps_s[1:]))


def test_composition_is_additive():
    s = account_step(account_step(AccountantState(), 0.05, 1.2, 30), 0.05, 1.2, 70)
    assert np.allclose(s.rdp, 100 * rdp_vector(0.05, 1.2))
    assert s.steps == 100


def test_stateful_accountant_agrees():
    acc = Accountant(0.01, 1.0)
    acc.step(400)
    assert acc.epsilon_after(600, 1e-5) == pytest.approx(epsilon_for(0.01, 1.0, 1000, 1e-5).epsilon)
    assert acc.state.steps == 400
    assert AccountantState.from_dict(acc.state.to_dict()).to_dict() == acc.state.to_dict()


def test_noise_solver_hits_target():
    s = solve_noise_multiplier(0.01, 1000, 1e-5, 3.0)
    assert epsilon_for(0.01, s, 1000, 1e-5).epsilon <= 3.0
    assert epsilon_for(0.01, s - 2e-3, 1000, 1e-5).epsilon > 3.0


def test_config_validation():
    with pytest.raises(ValueError):
        DpConfig(sampling_rate=0.0)
    with pytest.raises(ValueError):
        DpConfig(delta=1.0)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(0.1, 1.0, 1.0)


def test_epsilon_conversion_formula():
    state = account_step(AccountantState((2.0, 4.0)), 1.0, 2.0, 1)
    # rdp = alpha / 8; eps = min(0.25 + log(1e5), 0.5 + log(1e5) / 3)
    assert report_epsilon(state, 1e-5).epsilon == pytest.approx(0.5 + math.log(1e5) / 3)
