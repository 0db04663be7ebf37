"""Initial-point search, the joint reweighted / alternating / SCA loop, and baselines.

Loop levels recorded in :class:`IterateLog`:

``inner``   precoder steps at fixed rates, objective = approximated power cost
``middle``  alternation of precoder steps and the rate LP, objective = reweighted utility
``outer``   reweighting passes, objective = sum rate - eta * true total power
``init``    max-min steps of the initial-point search, objective = min g / R
``expand``  optional rate-expansion steps (see :func:`algorithm1`)

Index 1 of every inner / middle / outer sequence is the value at the warm
start; later indices are values after each solve.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .convexsolver import SolverSettings, real_embed, real_unembed, solve_qcqp
from .model import (FeasibilityReport, PowerBreakdown, achievable_rates,
                    association_from_precoders, block_energy, check_feasibility,
                    fronthaul_demand, fronthaul_rates, objective_p1, total_power)
from .scenario import Scenario
from .subproblems import (FreezeRow, approx_fronthaul_load, ReweightState, build_coefficients, build_feasibility_qcqp,
                          build_precoder_qcqp, build_surrogate, link_energy, objective_p2,
                          objective_p3, rate_upper_bound, solve_rate_lp, update_weights)

log = logging.getLogger(__name__)

__all__ = [
    "IterateRecord",
    "IterateLog",
    "InitResult",
    "RunResult",
    "algorithm2_init",
    "algorithm1",
    "baseline_spdc",
    "baseline_nocache",
    "run_scheme",
    "SCHEMES",
    "MONOTONE_SLACK",
]

SCHEMES = ("alg1-c", "alg1-nc", "spdc")
MONOTONE_SLACK = 1e-8  # relative: |v| * 1e-8, at least 1e-8
FEAS_TOL = 1e-6


def _slack(v: float) -> float:
    return MONOTONE_SLACK * max(1.0, abs(v))


def _rel_change(new: float, old: float, denom: float) -> float:
    return abs(new - old) / max(abs(denom), 1e-12)


# ----------------------------------------------------------------------------
# Logging
# ----------------------------------------------------------------------------

@dataclass
class IterateRecord:
    level: str
    outer: int
    middle: int
    index: int
    objective: float
    max_slack: float  # largest constraint violation of the iterate, 0 if feasible
    millis: float


@dataclass
class IterateLog:
    records: list[IterateRecord] = field(default_factory=list)

    CSV_COLUMNS = ("level", "outer", "middle", "index", "objective", "max_slack", "millis")

    def add(self, level, outer, middle, index, objective, max_slack=0.0, millis=0.0):
        self.records.append(IterateRecord(level, int(outer), int(middle), int(index),
                                          float(objective), float(max_slack), float(millis)))

    def level(self, name: str) -> list[IterateRecord]:
        return [r for r in self.records if r.level == name]

    def sequences(self, name: str) -> list[list[float]]:
        """Objective runs of one level, split where the parent loop index changes."""
        out: list[list[float]] = []
        key = None
        for r in self.level(name):
            k = (r.outer, r.middle) if name == "inner" else r.outer if name == "middle" else 0
            if name == "init":
                k = 0
            if k != key or r.index == 1:
                out.append([])
                key = k
            out[-1].append(r.objective)
        return out

    def count(self, name: str, solves_only: bool = True) -> int:
        return sum(1 for r in self.level(name) if not solves_only or r.index > 1
                   or name in ("expand",))

    def rows(self) -> list[tuple]:
        return [(r.level, r.outer, r.middle, r.index, repr(r.objective), repr(r.max_slack),
                 f"{r.millis:.3f}") for r in self.records]


def _violation(report: FeasibilityReport) -> float:
    return max(0.0, -report.worst)


# ----------------------------------------------------------------------------
# Results
# ----------------------------------------------------------------------------

@dataclass
class InitResult:
    F: np.ndarray
    weights: ReweightState
    R: np.ndarray
    status: str  # "ok" or "infeasible"
    min_ratio: float
    log: IterateLog
    retried: bool = False
    feasibility: FeasibilityReport | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class RunResult:
    scheme: str
    status: str  # "converged", "max-iterations", "infeasible-init", "solver-failure"
    F: np.ndarray
    R: np.ndarray
    association: np.ndarray
    sum_rate: float
    power: PowerBreakdown
    objective: float
    fronthaul: np.ndarray
    log: IterateLog
    n_outer: int
    n_middle: int
    n_inner: int
    n_expand: int
    feasibility: FeasibilityReport | None
    link_energy: np.ndarray  # (K_R, S)
    elapsed: float = 0.0
    message: str = ""
    # energy-weighted load the precoder program constrains, beside the exact ``fronthaul``
    fronthaul_approx: np.ndarray | None = None

    @property
    def p_total(self) -> float:
        return self.power.total

    @property
    def p_busy(self) -> float:
        return self.power.busy

    @property
    def n_qcqp(self) -> int:
        """Precoder programs solved by the joint loop (inner plus expansion steps)."""
        return self.n_inner + self.n_expand

    @property
    def active_errh(self) -> int:
        return int(np.sum(self.power.active))

    @property
    def ok(self) -> bool:
        return self.status in ("converged", "max-iterations")


# ----------------------------------------------------------------------------
# Initial feasible point
# ----------------------------------------------------------------------------

def _random_stack(scenario: Scenario, rng: np.random.Generator, max_draws: int = 100) -> np.ndarray:
    """Random precoders scaled so the strongest eRRH block carries P_i / (M K_U)."""
    cfg = scenario.cfg
    S, M, N_R, d = scenario.stack_shape
    budget = cfg.per_errh("tx_power_budget")
    pbar = float(np.min(budget)) / (M * cfg.num_ue)
    for _ in range(max_draws):
        F = (rng.standard_normal((S, M, N_R, d)) + 1j * rng.standard_normal((S, M, N_R, d)))
        E = block_energy(F, scenario.n_r)  # (S, M, K_R)
        F *= np.sqrt(pbar / E.max(axis=-1))[:, :, None, None]
        tx = block_energy(F, scenario.n_r).sum(axis=(0, 1))
        if np.all(tx < budget):
            return F
    raise RuntimeError("could not draw a random stack strictly inside the power budget")


def _t_bounds(R: np.ndarray, t0: float, scenario: Scenario) -> tuple[float, float]:
    ub = rate_upper_bound(scenario)
    per_slot = np.array([ub[scenario.ue_of_slot(s)] for s in range(R.shape[0])])
    t_max = float(np.min(per_slot[:, None] / R))
    hi = 2.0 * max(t_max, t0) + 1.0
    lo = t0 - 1.0 - abs(t0)
    return lo, hi


def _freeze_rows(F: np.ndarray, R: np.ndarray, scenario: Scenario) -> list[FreezeRow]:
    """Pin inactive links whose joint activation could overload a fronthaul link."""
    cfg = scenario.cfg
    thr = cfg.association_threshold
    a = association_from_precoders(F, scenario.n_r, thr)  # (K_U, K_R)
    D = fronthaul_demand(R, scenario.cache)  # (K_R, S)
    E = link_energy(F, scenario.n_r)
    cap = cfg.per_errh("fronthaul_capacity")
    rows = []
    for i in range(scenario.K_R):
        load = float(np.sum(a[:, i] * D[i]))
        cand = [s for s in range(R.shape[0]) if a[s, i] == 0 and D[i, s] > 0]
        if cand and load + sum(D[i, s] for s in cand) > cap[i] * (1 - 1e-9):
            rows += [FreezeRow(slot=s, errh=i, bound=0.5 * (E[i, s] + thr)) for s in cand]
    return rows


def _maxmin_step(F, R, weights, scenario, settings, freeze=None):
    """One max-min ratio step; returns (F_new, min_ratio) or (None, nan) on failure."""
    sur = build_surrogate(F, scenario)
    co = build_coefficients(weights, R, scenario, F)
    ratio0 = float(np.min(sur.g / R))
    t0 = ratio0 - 1e-6 * max(1.0, abs(ratio0))
    prob = build_feasibility_qcqp(sur, co, R, scenario, _t_bounds(R, t0, scenario), freeze)
    sol = solve_qcqp(prob, settings, np.r_[real_embed(F), t0])
    if sol.x is None:
        return None, math.nan
    F_new = real_unembed(sol.x, F.shape)
    return F_new, float(np.min(achievable_rates(F_new, scenario) / R))


def algorithm2_init(scenario: Scenario, settings: SolverSettings | None = None,
                    mu_frozen: bool = False, pinned: bool = False,
                    rng: np.random.Generator | None = None) -> InitResult:
    """Feasible starting point: random scaled precoders, rate LP, max-min ratio steps.

    ``pinned`` keeps every UE associated with every eRRH in the fronthaul
    check; ``mu_frozen`` zeroes the association weights (sole-precoder
    baseline).
    """
    cfg = scenario.cfg
    settings = settings or default_settings()
    rng = rng if rng is not None else np.random.default_rng([scenario.seed, 4])
    trace = IterateLog()
    F = _random_stack(scenario, rng)
    weights = update_weights(F, cfg, mu_frozen=mu_frozen)
    co = build_coefficients(weights, np.full((scenario.n_slots, scenario.M), cfg.qos_rate),
                            scenario, F)
    g = achievable_rates(F, scenario)
    ones = np.ones((cfg.num_ue, cfg.num_errh), dtype=int)
    lp = solve_rate_lp(co, np.maximum(g, cfg.qos_rate), scenario, association=ones)
    if lp.R is None:
        return InitResult(F=F, weights=weights, R=np.full(g.shape, cfg.qos_rate),
                          status="infeasible", min_ratio=math.nan, log=trace)
    R = lp.R
    retried = False
    ratio = float(np.min(g / R))
    while True:
        trace.add("init", 0, 0, 1, ratio)
        n = 1
        prev = ratio
        while n < cfg.max_inner + 1:
            t_start = time.perf_counter()
            F_new, new = _maxmin_step(F, R, weights, scenario, settings)
            n += 1
            if F_new is None or not np.isfinite(new) or new < prev - _slack(prev):
                break
            F, ratio = F_new, new
            trace.add("init", 0, 0, n, ratio, millis=1e3 * (time.perf_counter() - t_start))
            done = _rel_change(ratio, prev, ratio) <= cfg.eps4
            prev = ratio
            if done:
                break
        if ratio >= 1.0 or retried:
            break
        # lower the targets to what the precoders deliver and try once more
        g = achievable_rates(F, scenario)
        R = np.maximum(cfg.qos_rate, np.minimum(R, g))
        ratio = float(np.min(g / R))
        retried = True
    a = ones if pinned else None
    rep = check_feasibility(F, R, scenario, FEAS_TOL, association=a)
    status = "ok" if ratio >= 1.0 and rep.feasible else "infeasible"
    return InitResult(F=F, weights=weights, R=R, status=status, min_ratio=ratio, log=trace,
                      retried=retried, feasibility=rep)


# ----------------------------------------------------------------------------
# Joint algorithm
# ----------------------------------------------------------------------------

def default_settings() -> SolverSettings:
    return SolverSettings()


def _p1(F, R, scenario, pinned):
    a = np.ones((scenario.cfg.num_ue, scenario.K_R), dtype=int) if pinned else \
        association_from_precoders(F, scenario.n_r, scenario.cfg.association_threshold)
    return objective_p1(F, a, R, scenario)


def _assoc(F, scenario, pinned):
    if pinned:
        return np.ones((scenario.cfg.num_ue, scenario.K_R), dtype=int)
    return association_from_precoders(F, scenario.n_r, scenario.cfg.association_threshold)


class _Failure(Exception):
    pass


def algorithm1(scenario: Scenario, init: InitResult | None = None,
               settings: SolverSettings | None = None, scheme: str = "alg1-c",
               mu_frozen: bool = False, pinned: bool = False) -> RunResult:
    """Outer reweighting, middle alternation, inner SCA precoder steps.

    Follows the loop order of the listing: precoder steps for the current
    rates, then the rate LP, until the reweighted utility settles; then the
    weights are refreshed.  When ``cfg.rate_expansion`` is set, every outer
    pass begins with max-min ratio steps, each followed by the rate LP and
    kept only if it raises the true objective; they repeat while the gain
    exceeds ``eps3``.
    """
    cfg = scenario.cfg
    settings = settings or default_settings()
    started = time.perf_counter()
    if init is None:
        init = algorithm2_init(scenario, settings, mu_frozen=mu_frozen, pinned=pinned)
    trace = IterateLog()
    trace.records.extend(init.log.records)
    if not init.ok:
        return _result(scheme, "infeasible-init", init.F, init.R, scenario, trace, pinned,
                       0, 0, 0, 0, started, "initial point search failed")
    F, R, weights = init.F.copy(), init.R.copy(), init.weights
    if mu_frozen and not weights.mu_frozen:
        weights = update_weights(F, cfg, mu_frozen=True)
    n_outer = n_middle = n_inner = n_expand = 0
    status = "max-iterations"
    message = ""
    p1 = _p1(F, R, scenario, pinned)
    trace.add("outer", 1, 0, 1, p1, _violation(_feas(F, R, scenario, pinned)))
    try:
        for p in range(2, cfg.max_outer + 2):
            n_outer += 1
            if cfg.rate_expansion:
                F, R, took = _expansion_loop(F, R, weights, scenario, settings, pinned, trace, p)
                n_expand += took
            F, R, nm, ni = _middle_loop(F, R, weights, scenario, settings, pinned, trace, p)
            n_middle += nm
            n_inner += ni
            weights = update_weights(F, cfg, mu_frozen=mu_frozen)
            new = _p1(F, R, scenario, pinned)
            trace.add("outer", p, 0, p, new, _violation(_feas(F, R, scenario, pinned)))
            done = _rel_change(new, p1, p1) <= cfg.eps1
            p1 = new
            if done:
                status = "converged"
                break
    except _Failure as exc:
        status, message = "solver-failure", str(exc)
    return _result(scheme, status, F, R, scenario, trace, pinned, n_outer, n_middle, n_inner,
                   n_expand, started, message)


def _feas(F, R, scenario, pinned) -> FeasibilityReport:
    a = np.ones((scenario.cfg.num_ue, scenario.K_R), dtype=int) if pinned else None
    return check_feasibility(F, R, scenario, FEAS_TOL, association=a)


def _middle_loop(F, R, weights, scenario, settings, pinned, trace, p):
    cfg = scenario.cfg
    p2 = objective_p2(F, R, weights, scenario)
    trace.add("middle", p, 1, 1, p2)
    n_inner = 0
    kappa = 1
    for kappa in range(2, cfg.max_middle + 2):
        F, ni = _inner_loop(F, R, weights, scenario, settings, pinned, trace, p, kappa)
        n_inner += ni
        t0 = time.perf_counter()
        co = build_coefficients(weights, R, scenario, F)
        g = achievable_rates(F, scenario)
        lp = solve_rate_lp(co, g, scenario, association=_assoc(F, scenario, pinned),
                           approx_row=not weights.mu_frozen, x0=R)
        R_new = R
        if lp.R is not None:
            cand = objective_p2(F, lp.R, weights, scenario)
            rep = _feas(F, lp.R, scenario, pinned)
            if cand >= objective_p2(F, R, weights, scenario) - _slack(p2) and rep.feasible:
                R_new = lp.R
        else:
            log.warning("rate LP returned %s; keeping previous rates", lp.status)
        R = R_new
        new = objective_p2(F, R, weights, scenario)
        trace.add("middle", p, kappa, kappa, new, _violation(_feas(F, R, scenario, pinned)),
                  1e3 * (time.perf_counter() - t0))
        done = _rel_change(new, p2, p2) <= cfg.eps2
        p2 = new
        if done:
            break
    return F, R, kappa - 1, n_inner


def _inner_loop(F, R, weights, scenario, settings, pinned, trace, p, kappa):
    cfg = scenario.cfg
    co = build_coefficients(weights, R, scenario, F)
    p3 = objective_p3(F, co, scenario)
    trace.add("inner", p, kappa, 1, p3)
    solves = 0
    for n in range(2, cfg.max_inner + 2):
        t0 = time.perf_counter()
        sur = build_surrogate(F, scenario)
        freeze = [] if pinned else _freeze_rows(F, R, scenario)
        prob = build_precoder_qcqp(sur, co, R, scenario, freeze)
        sol = solve_qcqp(prob, settings, real_embed(F))
        solves += 1
        if sol.x is None:
            if solves == 1:
                raise _Failure(f"precoder step failed ({sol.status}) at outer {p}")
            break
        F_new = real_unembed(sol.x, F.shape)
        new = objective_p3(F_new, co, scenario)
        rep = _feas(F_new, R, scenario, pinned)
        if new > p3 + _slack(p3) or not rep.feasible:
            # numerical guard: keep the previous iterate and end this loop
            log.debug("inner step rejected (p3 %.6g -> %.6g, feasible=%s)", p3, new, rep.feasible)
            break
        F = F_new
        trace.add("inner", p, kappa, n, new, _violation(rep), 1e3 * (time.perf_counter() - t0))
        done = _rel_change(new, p3, new) <= cfg.eps3
        p3 = new
        if done:
            break
    return F, solves


def _expansion_loop(F, R, weights, scenario, settings, pinned, trace, p):
    """Repeat expansion steps while each one raises the objective by more than eps3."""
    cfg = scenario.cfg
    steps = 0
    current = _p1(F, R, scenario, pinned)
    for _ in range(cfg.max_inner):
        F, R, accepted = _expand(F, R, weights, scenario, settings, pinned, trace, p)
        steps += 1
        if not accepted:
            break
        new = _p1(F, R, scenario, pinned)
        done = _rel_change(new, current, current) <= cfg.eps3
        current = new
        if done:
            break
    return F, R, steps


def _expand(F, R, weights, scenario, settings, pinned, trace, p):
    """Max-min ratio step plus rate LP; kept only if the true objective improves."""
    t0 = time.perf_counter()
    freeze = [] if pinned else _freeze_rows(F, R, scenario)
    F_new, _ = _maxmin_step(F, R, weights, scenario, settings, freeze)
    if F_new is None:
        return F, R, False
    co = build_coefficients(weights, R, scenario, F_new)
    g = achievable_rates(F_new, scenario)
    lp = solve_rate_lp(co, g, scenario, association=_assoc(F_new, scenario, pinned),
                       approx_row=not weights.mu_frozen, x0=R)
    old = _p1(F, R, scenario, pinned)
    if lp.R is None:
        return F, R, False
    rep = _feas(F_new, lp.R, scenario, pinned)
    new = _p1(F_new, lp.R, scenario, pinned)
    accepted = rep.feasible and new > old
    trace.add("expand", p, 0, 1 if accepted else 0, new if accepted else old, _violation(rep),
              1e3 * (time.perf_counter() - t0))
    if accepted:
        return F_new, lp.R, True
    return F, R, False


def _result(scheme, status, F, R, scenario, trace, pinned, n_outer, n_middle, n_inner, n_expand,
            started, message) -> RunResult:
    a = _assoc(F, scenario, pinned)
    power = total_power(F, a, R, scenario)
    return RunResult(
        scheme=scheme, status=status, F=F, R=R, association=a, sum_rate=float(np.sum(R)),
        power=power, objective=objective_p1(F, a, R, scenario),
        fronthaul=fronthaul_rates(a, R, scenario.cache), log=trace, n_outer=n_outer,
        n_middle=n_middle, n_inner=n_inner, n_expand=n_expand,
        feasibility=_feas(F, R, scenario, pinned), link_energy=link_energy(F, scenario.n_r),
        elapsed=time.perf_counter() - started, message=message,
        fronthaul_approx=approx_fronthaul_load(
            F, R, update_weights(F, scenario.cfg, mu_frozen=pinned), scenario))


def baseline_spdc(scenario: Scenario, init: InitResult | None = None,
                  settings: SolverSettings | None = None) -> RunResult:
    """Every eRRH serves every UE: association weights off, association pinned to ones."""
    if init is not None and not init.weights.mu_frozen:
        init = InitResult(F=init.F, weights=update_weights(init.F, scenario.cfg, mu_frozen=True),
                          R=init.R, status=init.status, min_ratio=init.min_ratio, log=init.log,
                          retried=init.retried, feasibility=init.feasibility)
    if init is None:
        init = algorithm2_init(scenario, settings, mu_frozen=True, pinned=True)
    return algorithm1(scenario, init, settings, scheme="spdc", mu_frozen=True, pinned=True)


def baseline_nocache(scenario: Scenario, init: InitResult | None = None,
                     settings: SolverSettings | None = None) -> RunResult:
    """The joint algorithm on the same draws with every cache emptied."""
    sc = scenario.without_cache()
    return algorithm1(sc, init, settings, scheme="alg1-nc")


def run_scheme(scheme: str, scenario: Scenario, settings: SolverSettings | None = None) -> RunResult:
    if scheme == "alg1-c":
        return algorithm1(scenario, None, settings)
    if scheme == "alg1-nc":
        return baseline_nocache(scenario, None, settings)
    if scheme == "spdc":
        return baseline_spdc(scenario, None, settings)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
