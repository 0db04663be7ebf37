import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from cachefran.convexsolver import real_embed, real_unembed, solve_qcqp
from cachefran.model import achievable_rates, block_energy
from cachefran.scenario import ScenarioConfig, make_scenario
from cachefran.subproblems import (FreezeRow, ReweightState, build_coefficients,
                                   build_feasibility_qcqp, build_precoder_qcqp, build_surrogate,
                                   link_energy, objective_p2, objective_p3, solve_rate_lp,
                                   update_weights)

from conftest import random_stack, small_config

C1 = 0.0868588209364143  # default c1, computed independently with mpmath


def feasible_stack(sc, rng, energy=0.02):
    """Random stack whose per-eRRH energy is exactly ``energy``."""
    F = random_stack(rng, sc.stack_shape)
    E = block_energy(F, sc.n_r).sum(axis=(0, 1))
    for i in range(sc.K_R):
        F[:, :, i * sc.n_r:(i + 1) * sc.n_r] *= np.sqrt(energy / E[i])
    return F


# ---------------------------------------------------------------- weights

def test_weight_at_zero_energy():
    cfg = ScenarioConfig()
    st_ = update_weights(np.zeros((3, 2, 35, 2), complex), cfg)
    assert np.allclose(st_.mu, 8685.88209364143, rtol=1e-12)
    assert np.allclose(st_.theta, cfg.c2 / cfg.tau2, rtol=1e-12)


def test_weight_is_inverse_energy_for_large_energy(default_scenario, rng):
    F = feasible_stack(default_scenario, rng, 100.0)
    st_ = update_weights(F, default_scenario.cfg)
    E = link_energy(F, default_scenario.n_r).T
    assert np.allclose(st_.mu * E, C1, rtol=1e-5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_weights_are_positive_and_fall_with_energy(seed):
    cfg = ScenarioConfig()
    rng = np.random.default_rng(seed)
    F = random_stack(rng, (3, 2, 35, 2), 0.01)
    a, b = update_weights(F, cfg), update_weights(np.sqrt(2) * F, cfg)
    assert np.all(a.mu > 0) and np.all(a.theta > 0)
    assert np.all(b.mu < a.mu) and np.all(b.theta < a.theta)


def test_frozen_weights_are_zero(default_scenario, rng):
    F = feasible_stack(default_scenario, rng)
    assert not update_weights(F, default_scenario.cfg, mu_frozen=True).mu.any()


# ---------------------------------------------------------------- coefficients

def test_full_cache_removes_fronthaul_terms(rng):
    sc = make_scenario(ScenarioConfig(cache_fraction=1.0), 0)
    F = feasible_stack(sc, rng)
    co = build_coefficients(update_weights(F, sc.cfg), np.full((3, 2), 5.0), sc, F)
    assert not co.vartheta.any() and not co.q.any()


def test_tau_reduces_to_amplifier_slope(rng):
    sc = make_scenario(ScenarioConfig(fronthaul_slope=0.0), 0)
    F = feasible_stack(sc, rng)
    w = update_weights(F, sc.cfg)
    w = ReweightState(mu=w.mu, theta=np.zeros(7), c1=w.c1, c2=w.c2, tau1=w.tau1, tau2=w.tau2)
    co = build_coefficients(w, np.full((3, 2), 5.0), sc, F)
    assert np.all(co.tau == 2.8)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_approximate_power_identity(seed):
    sc = make_scenario(ScenarioConfig(), seed % 10)
    rng = np.random.default_rng(seed)
    F = feasible_stack(sc, rng, rng.uniform(1e-4, 0.2))
    R = rng.uniform(0.1, 40, (3, 2))
    co = build_coefficients(update_weights(F, sc.cfg), R, sc, F)
    direct = 7 * 56.0 + float(np.sum(co.tau * co.energy))
    assert co.approx_power(R) == pytest.approx(direct, rel=1e-12)
    w = update_weights(F, sc.cfg)
    assert objective_p2(F, R, w, sc) == pytest.approx(R.sum() - sc.cfg.eta * direct, rel=1e-12)
    assert objective_p3(F, co, sc) == pytest.approx(sc.cfg.eta * (direct - 7 * 56.0), rel=1e-12)


# ---------------------------------------------------------------- rate LP

def _coeffs(sc, rng, energy=0.02):
    F = feasible_stack(sc, rng, energy)
    return build_coefficients(update_weights(F, sc.cfg), np.full((3, 2), 1.0), sc, F), F


def test_zero_eta_gives_upper_rates(rng):
    sc = make_scenario(ScenarioConfig(eta=0.0, fronthaul_capacity=1e9), 0)
    co, _ = _coeffs(sc, rng)
    g = rng.uniform(5, 60, (3, 2))
    res = solve_rate_lp(co, g, sc)
    assert res.R == pytest.approx(np.minimum(40.0, g), abs=1e-7)


def test_negative_net_gain_gives_qos_rates(rng):
    sc = make_scenario(ScenarioConfig(eta=10.0, cache_fraction=0.0, fronthaul_capacity=1e9), 0)
    co, _ = _coeffs(sc, rng)
    assert np.all(1 - sc.cfg.eta * co.q.sum(axis=0) < 0)
    res = solve_rate_lp(co, np.full((3, 2), 30.0), sc)
    assert res.R == pytest.approx(np.full((3, 2), 0.1), abs=1e-7)


def test_low_rate_bound_is_pinned(rng, caplog):
    sc = make_scenario(ScenarioConfig(fronthaul_capacity=1e9), 0)
    co, _ = _coeffs(sc, rng)
    g = np.full((3, 2), 10.0)
    g[1, 1] = 0.05
    res = solve_rate_lp(co, g, sc)
    assert res.clamped == [(1, 1)]
    assert res.R[1, 1] == 0.05


@pytest.mark.parametrize("seed", range(6))
def test_rate_lp_matches_highs(seed):
    rng = np.random.default_rng(seed)
    sc = make_scenario(ScenarioConfig(fronthaul_capacity=rng.uniform(5, 60), eta=1e-2), seed)
    co, F = _coeffs(sc, rng)
    g = rng.uniform(5, 60, (3, 2))
    a = rng.integers(0, 2, (3, 7))
    res = solve_rate_lp(co, g, sc, association=a)
    # independent oracle: the same LP stated from the raw coefficients
    c = sc.cache.c
    net = 1 - sc.cfg.eta * co.q.sum(axis=0)
    w_approx = (co.mu.T * co.energy)[:, :, None] * (1 - c)
    w_exact = a.T[:, :, None] * (1 - c)
    A = np.vstack([w_approx.reshape(7, -1), w_exact.reshape(7, -1)])
    b = np.full(14, sc.cfg.fronthaul_capacity)
    bounds = list(zip(np.full(6, 0.1), np.minimum(40, g).reshape(-1)))
    ref = linprog(-net.reshape(-1), A_ub=A, b_ub=b, bounds=bounds, method="highs")
    if ref.status == 2:
        assert res.R is None
        return
    assert res.R is not None
    assert -float(net.reshape(-1) @ res.R.reshape(-1)) == pytest.approx(ref.fun, abs=1e-6)


def test_two_subfile_lp_with_binding_row_matches_vertices(rng):
    # one UE, two subfiles, nothing cached: only the fronthaul rows couple the rates
    cfg = small_config(num_ue=1, cache_fraction=0.0, fronthaul_capacity=30.0, eta=1e-2)
    sc = make_scenario(cfg, 4)
    F = feasible_stack(sc, rng, 0.05)
    co = build_coefficients(update_weights(F, cfg), np.full((1, 2), 1.0), sc, F)
    g = np.array([[25.0, 35.0]])
    a = np.ones((1, 3), int)
    res = solve_rate_lp(co, g, sc, association=a)
    net = (1 - cfg.eta * co.q.sum(axis=0)).ravel()
    w = np.vstack([(co.mu.T * co.energy)[:, :, None].repeat(2, 2).reshape(3, 2), np.ones((3, 2))])
    rows = np.vstack([w, -np.eye(2), np.eye(2)])
    rhs = np.concatenate([np.full(6, 30.0), [-0.1, -0.1], [25.0, 35.0]])
    best = -np.inf
    for i, j in itertools.combinations(range(rows.shape[0]), 2):
        sub = rows[[i, j]]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        x = np.linalg.solve(sub, rhs[[i, j]])
        if np.all(rows @ x <= rhs + 1e-9):
            best = max(best, float(net @ x))
    assert float(net @ res.R.ravel()) == pytest.approx(best, abs=1e-6)
    assert res.R.sum() == pytest.approx(30.0, abs=1e-6)  # the exact fronthaul row binds


# ---------------------------------------------------------------- surrogate

def test_surrogate_is_tight(default_scenario, rng):
    F = feasible_stack(default_scenario, rng)
    sur = build_surrogate(F, default_scenario)
    g = achievable_rates(F, default_scenario)
    assert sur.evaluate(F) == pytest.approx(g, rel=1e-9, abs=1e-9)
    assert sur.g == pytest.approx(g, rel=1e-9, abs=1e-9)


def test_surrogate_is_a_minorant(default_scenario, rng):
    F = feasible_stack(default_scenario, rng)
    sur = build_surrogate(F, default_scenario)
    for k in range(50):
        scale = 10.0 ** rng.uniform(-3, 0)
        Fp = F + scale * feasible_stack(default_scenario, rng)
        assert np.all(sur.evaluate(Fp) <= achievable_rates(Fp, default_scenario) + 1e-9)


def test_surrogate_matches_gradient(default_scenario, rng):
    F = feasible_stack(default_scenario, rng)
    sur = build_surrogate(F, default_scenario)
    D = feasible_stack(default_scenario, rng)
    h = 1e-6
    num_true = (achievable_rates(F + h * D, default_scenario)
                - achievable_rates(F - h * D, default_scenario)) / (2 * h)
    num_sur = (sur.evaluate(F + h * D) - sur.evaluate(F - h * D)) / (2 * h)
    assert num_sur == pytest.approx(num_true, rel=1e-4, abs=1e-6)


def test_surrogate_at_zero_stack(default_scenario, rng):
    sur = build_surrogate(np.zeros(default_scenario.stack_shape, complex), default_scenario)
    assert not sur.g_nats.any()
    assert not sur.evaluate(feasible_stack(default_scenario, rng)).any()


# ---------------------------------------------------------------- precoder step

def _precoder_setup(sc, rng, fraction=0.5):
    F = feasible_stack(sc, rng, 0.05)
    sur = build_surrogate(F, sc)
    R = fraction * achievable_rates(F, sc)
    co = build_coefficients(update_weights(F, sc.cfg), R, sc, F)
    return F, sur, R, co


def test_precoder_objective_scales_with_eta(small_scenario, rng):
    F, sur, R, co = _precoder_setup(small_scenario, rng)
    zero = build_precoder_qcqp(sur, co, R, small_scenario.with_config(eta=0.0))
    assert not zero.objective_blocks.any()
    one = build_precoder_qcqp(sur, co, R, small_scenario.with_config(eta=1.0))
    two = build_precoder_qcqp(sur, co, R, small_scenario.with_config(eta=2.0))
    assert np.allclose(2 * one.objective_blocks, two.objective_blocks, rtol=1e-14)


def test_full_cache_has_no_fronthaul_rows(rng):
    sc = make_scenario(small_config(cache_fraction=1.0), 3)
    F, sur, R, co = _precoder_setup(sc, rng)
    labels = build_precoder_qcqp(sur, co, R, sc).labels
    assert not [l for l in labels if l.startswith("fronthaul")]
    assert sum(l.startswith("power") for l in labels) == 3
    assert sum(l.startswith("rate") for l in labels) == 4


def test_builder_rows_agree_with_direct_evaluation(small_scenario, rng):
    F, sur, R, co = _precoder_setup(small_scenario, rng)
    freeze = [FreezeRow(slot=1, errh=2, bound=0.003)]
    prob = build_precoder_qcqp(sur, co, R, small_scenario, freeze)
    Fp = feasible_stack(small_scenario, rng, 0.04)
    x = real_embed(Fp)
    B = x[: prob.n_blocks * prob.block_size].reshape(prob.n_blocks, prob.block_size)
    quad = 0.5 * np.einsum("jbk,jbkl,bl->j", B[None].repeat(prob.m, 0), prob.constraint_blocks, B)
    lhs = quad + prob.constraint_linear @ x - prob.rhs
    E = block_energy(Fp, small_scenario.n_r)
    W = small_scenario.cfg.bandwidth
    gamma = sur.evaluate(Fp)
    for j, label in enumerate(prob.labels):
        kind, idx = label[:-1].split("[")
        if kind == "power":
            expect = E[..., int(idx)].sum() - small_scenario.cfg.tx_power_budget
        elif kind == "freeze":
            s, i = map(int, idx.split(","))
            expect = E[s, :, i].sum() - 0.003
        elif kind == "fronthaul":
            i = int(idx)
            expect = float(co.vartheta[i] @ E[:, :, i].sum(axis=1)) - small_scenario.cfg.fronthaul_capacity
        else:
            s, m = map(int, idx.split(","))
            expect = (R[s, m] - gamma[s, m]) * np.log(2) / W
        assert lhs[j] == pytest.approx(expect, rel=1e-9, abs=1e-12), label


def _tiny_scenario():
    cfg = ScenarioConfig(num_errh=2, errh_positions=((0.0, 0.0), (0.3, 0.0)), num_ue=1,
                         antennas_errh=1, antennas_ue=1, streams=1, library_size=2,
                         subfiles_per_file=1, fronthaul_capacity=1e9)
    return make_scenario(cfg, 5)


def test_tiny_precoder_step_matches_random_search():
    # two single-antenna eRRHs, one single-stream subfile: four real unknowns
    sc = _tiny_scenario()
    rng = np.random.default_rng(7)
    F, sur, R, co = _precoder_setup(sc, rng, 0.7)
    sol = solve_qcqp(build_precoder_qcqp(sur, co, R, sc))
    assert sol.optimal
    v, G, const = sur.V[0, 0, :, 0], sur.G[0, 0], sur.const[0, 0]
    target = R[0, 0] * np.log(2) / sc.cfg.bandwidth
    weight = sc.cfg.eta * co.tau[:, 0]
    budget = sc.cfg.tx_power_budget

    def evaluate(f):  # f: (batch, 2) complex, one entry per eRRH
        power = np.abs(f) ** 2
        gamma = const + 2 * (f @ v.conj()).real - np.einsum("bi,ij,bj->b", f.conj(), G, f).real
        ok = (gamma >= target) & np.all(power <= budget, axis=1)
        return np.where(ok, power @ weight, np.inf)

    # adaptive random search: 100 rounds of 10^4 points around the incumbent
    best_f = F[0, 0, :, 0].copy()
    best = float(evaluate(best_f[None])[0])
    radius = np.sqrt(budget)
    for _ in range(100):
        cand = best_f + radius * (rng.standard_normal((10_000, 2))
                                  + 1j * rng.standard_normal((10_000, 2))) / np.sqrt(2)
        vals = evaluate(cand)
        k = int(np.argmin(vals))
        if vals[k] < best:
            best, best_f = float(vals[k]), cand[k]
        else:
            radius *= 0.7
    assert sol.objective <= best + 1e-12
    assert sol.objective == pytest.approx(best, rel=1e-3)


def test_vanishing_weight_returns_a_feasible_point(small_scenario, rng):
    F, sur, R, co = _precoder_setup(small_scenario, rng)
    sc = small_scenario.with_config(eta=0.0)
    prob = build_precoder_qcqp(sur, co, R, sc)
    sol = solve_qcqp(prob)
    assert sol.optimal and sol.objective == 0.0
    Fs = real_unembed(sol.x, F.shape)
    assert np.all(sur.evaluate(Fs) >= R - 1e-9)
    assert np.all(block_energy(Fs, sc.n_r).sum(axis=(0, 1)) <= sc.cfg.tx_power_budget + 1e-12)


# ---------------------------------------------------------------- feasibility step

def test_max_min_ratio_at_least_one_when_feasible(small_scenario, rng):
    F, sur, R, co = _precoder_setup(small_scenario, rng, 0.5)
    sol = solve_qcqp(build_feasibility_qcqp(sur, co, R, small_scenario, (0.0, 100.0)))
    assert sol.optimal and sol.x[-1] >= 1.0


def test_doubling_rates_halves_ratio(small_scenario, rng):
    F, sur, R, co = _precoder_setup(small_scenario, rng, 0.5)
    t1 = solve_qcqp(build_feasibility_qcqp(sur, co, R, small_scenario, (0.0, 100.0))).x[-1]
    t2 = solve_qcqp(build_feasibility_qcqp(sur, co, 2 * R, small_scenario, (0.0, 100.0))).x[-1]
    assert t2 == pytest.approx(t1 / 2, rel=1e-6)


def test_tiny_ratio_is_not_beaten_by_random_search():
    sc = _tiny_scenario()
    rng = np.random.default_rng(11)
    F, sur, R, co = _precoder_setup(sc, rng, 1.0)
    sol = solve_qcqp(build_feasibility_qcqp(sur, co, R, sc, (0.0, 100.0)))
    t_star = sol.x[-1]
    Fs = real_unembed(sol.x, sc.stack_shape)
    assert np.min(sur.evaluate(Fs) / R) == pytest.approx(t_star, rel=1e-6)
    # adaptive random search around the optimum never does better
    budget = sc.cfg.tx_power_budget
    best, centre, step = 0.0, Fs, 0.1
    for _ in range(2000):
        cand = centre + step * np.sqrt(budget) * random_stack(rng, sc.stack_shape)
        E = block_energy(cand, sc.n_r).sum(axis=(0, 1))
        cand = cand * np.sqrt(min(1.0, budget / E.max()))
        val = np.min(sur.evaluate(cand) / R)
        if val > best:
            best, centre = val, cand
        else:
            step = max(step * 0.995, 1e-4)
    assert best <= t_star + 1e-3
