import numpy as np
import pytest

from cachefran.convexsolver import real_embed, real_unembed, solve_qcqp
from cachefran.driver import (SCHEMES, IterateLog, algorithm1, algorithm2_init, baseline_spdc,
                              default_settings, run_scheme)
from cachefran.driver import _freeze_rows
from cachefran.model import (achievable_rates, association_from_precoders, check_feasibility,
                             fronthaul_rates)
from cachefran.scenario import make_scenario
from cachefran.subproblems import (build_coefficients, build_precoder_qcqp, build_surrogate,
                                   solve_rate_lp)

from conftest import small_config

SLACK = 1e-8


def _nonincreasing(seq):
    return all(b <= a + SLACK * max(1.0, abs(a)) for a, b in zip(seq, seq[1:]))


def _nondecreasing(seq):
    return all(b >= a - SLACK * max(1.0, abs(a)) for a, b in zip(seq, seq[1:]))


@pytest.fixture(scope="module")
def small_runs(small_scenario):
    return {s: run_scheme(s, small_scenario) for s in SCHEMES}


# ---------------------------------------------------------------- initial point

def test_initial_point_is_feasible(default_scenario):
    init = algorithm2_init(default_scenario)
    assert init.ok
    rep = check_feasibility(init.F, init.R, default_scenario, 1e-6)
    assert rep.feasible, rep.violations
    assert init.min_ratio >= 1.0


def test_initial_scaling_per_precoder(default_scenario):
    # the random draw is scaled so the strongest block of every (slot, subfile) is P_i/(M K_U)
    from cachefran.driver import _random_stack
    from cachefran.model import block_energy
    F = _random_stack(default_scenario, np.random.default_rng(0))
    E = block_energy(F, default_scenario.n_r)
    assert np.allclose(E.max(axis=-1), 0.041864773858493, rtol=1e-12)


def test_full_cache_huge_fronthaul_initialises():
    sc = make_scenario(small_config(cache_fraction=1.0, fronthaul_capacity=1e9), 2)
    init = algorithm2_init(sc)
    assert init.ok
    assert not fronthaul_rates(np.ones((2, 3), int), init.R, sc.cache).any()


def test_unreachable_qos_reports_infeasible():
    # the QoS floor is far beyond what the power budget can deliver
    sc = make_scenario(small_config(qos_rate=39.0, tx_power_budget=1e-9), 0)
    init = algorithm2_init(sc)
    assert init.status == "infeasible"
    run = algorithm1(sc, init)
    assert run.status == "infeasible-init" and not run.ok


# ---------------------------------------------------------------- single pass

def test_huge_tolerances_give_one_pass_of_each_loop(small_scenario):
    sc = small_scenario.with_config(eps1=1e9, eps2=1e9, eps3=1e9, rate_expansion=False)
    init = algorithm2_init(sc)
    run = algorithm1(sc, init)
    assert (run.n_outer, run.n_middle, run.n_inner, run.n_expand) == (1, 1, 1, 0)
    # the same step assembled by hand: one precoder program, then one rate LP
    settings = default_settings()
    co = build_coefficients(init.weights, init.R, sc, init.F)
    prob = build_precoder_qcqp(build_surrogate(init.F, sc), co, init.R, sc,
                               _freeze_rows(init.F, init.R, sc))
    F1 = real_unembed(solve_qcqp(prob, settings, real_embed(init.F)).x, init.F.shape)
    co1 = build_coefficients(init.weights, init.R, sc, F1)
    lp = solve_rate_lp(co1, achievable_rates(F1, sc), sc,
                       association=association_from_precoders(F1, sc.n_r), x0=init.R)
    assert np.array_equal(run.F, F1)
    assert np.array_equal(run.R, lp.R)


# ---------------------------------------------------------------- monotonicity

def test_inner_and_middle_monotone_on_default(default_run):
    assert default_run.ok
    for seq in default_run.log.sequences("inner"):
        assert _nonincreasing(seq)
    for seq in default_run.log.sequences("middle"):
        assert _nondecreasing(seq)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_monotone_on_small_scenario(small_runs, scheme):
    run = small_runs[scheme]
    assert run.ok
    assert all(_nonincreasing(s) for s in run.log.sequences("inner"))
    assert all(_nondecreasing(s) for s in run.log.sequences("middle"))


@pytest.mark.parametrize("scheme", SCHEMES)
def test_accepted_iterates_are_feasible(small_runs, scheme):
    run = small_runs[scheme]
    for level in ("outer", "middle", "inner", "expand"):
        assert all(r.max_slack <= 1e-6 for r in run.log.level(level)), level
    assert run.feasibility.feasible
    assert run.feasibility.worst >= -1e-5


def test_log_indices_are_contiguous_and_finite(default_run):
    log = default_run.log
    outer = [r.index for r in log.level("outer")]
    assert outer == list(range(1, len(outer) + 1))
    for level in ("inner", "middle"):
        for seq in log.sequences(level):
            assert all(np.isfinite(seq))
    assert all(np.isfinite(r.objective) for r in log.records)


# ---------------------------------------------------------------- baselines

def test_spdc_associates_everything(small_runs):
    assert np.all(small_runs["spdc"].association == 1)


def test_spdc_full_cache_fetches_nothing():
    sc = make_scenario(small_config(cache_fraction=1.0), 1)
    run = baseline_spdc(sc)
    assert run.ok
    assert not run.fronthaul.any()


def test_nocache_fetches_every_subfile(small_runs, small_scenario):
    run = small_runs["alg1-nc"]
    expected = run.association.T @ run.R.sum(axis=1)
    assert run.fronthaul == pytest.approx(expected, rel=1e-12)
    assert run.scheme == "alg1-nc"


# ---------------------------------------------------------------- result contract

@pytest.mark.parametrize("scheme", SCHEMES[:1])
def test_final_association_is_thresholded_precoders(small_runs, scheme):
    run = small_runs[scheme]
    assert np.array_equal(run.association, association_from_precoders(run.F, 2, 1e-6))


def test_result_fields(small_runs, small_scenario):
    run = small_runs["alg1-c"]
    assert run.sum_rate == pytest.approx(run.R.sum())
    assert run.p_busy == pytest.approx(run.p_total - 3 * 56.0)
    assert run.n_qcqp == run.n_inner + run.n_expand
    assert 0 <= run.active_errh <= 3
    assert run.fronthaul_approx.shape == run.fronthaul.shape
    assert np.all(run.fronthaul_approx >= 0)
    assert not small_runs["spdc"].fronthaul_approx.any()  # frozen weights drop the row


def test_runs_are_deterministic(small_scenario, small_runs):
    again = run_scheme("alg1-c", small_scenario)
    first = small_runs["alg1-c"]
    assert np.array_equal(again.F, first.F)
    assert np.array_equal(again.R, first.R)
    assert [r.objective for r in again.log.records] == [r.objective for r in first.log.records]


def test_unknown_scheme(small_scenario):
    with pytest.raises(ValueError, match="unknown scheme"):
        run_scheme("nope", small_scenario)


def test_iterate_log_sequences():
    log = IterateLog()
    for outer, middle, idx, val in [(2, 2, 1, 5.0), (2, 2, 2, 4.0), (2, 3, 1, 3.9), (3, 2, 1, 3.0)]:
        log.add("inner", outer, middle, idx, val)
    assert log.sequences("inner") == [[5.0, 4.0], [3.9], [3.0]]
    assert log.count("inner") == 1
