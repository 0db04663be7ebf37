"""Convex subproblems built around the current iterate.

* :func:`update_weights` / :func:`build_coefficients` - reweighted-l1
  weights and the linearised power / fronthaul coefficients.
* :func:`solve_rate_lp` - data-rate allocation for fixed precoders.
* :func:`build_surrogate` - concave minorant of every SIC rate.
* :func:`build_precoder_qcqp` - minimum-power precoder step for fixed rates.
* :func:`build_feasibility_qcqp` - max-min rate-ratio step (epigraph form).

QCQP variables are ``real_embed(F)`` with one block per precoder column;
the feasibility program appends the epigraph scalar as its last entry.
Rate constraints are stated in nats, i.e. Mb/s times ln2 / W.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .convexsolver import (ConvexQcqp, LinearProgram, Solution, SolverSettings, embed_hermitian,
                           real_embed, solve_lp)
from .model import achievable_rates, block_energy
from .scenario import Scenario, ScenarioConfig

log = logging.getLogger(__name__)

__all__ = [
    "ReweightState",
    "update_weights",
    "ApproxCoefficients",
    "build_coefficients",
    "objective_p2",
    "approx_fronthaul_load",
    "RateLpResult",
    "solve_rate_lp",
    "Surrogate",
    "build_surrogate",
    "FreezeRow",
    "build_precoder_qcqp",
    "build_feasibility_qcqp",
    "objective_p3",
    "link_energy",
]

LN2 = math.log(2.0)


def link_energy(F: np.ndarray, n_r: int) -> np.ndarray:
    """Per (eRRH, slot) energy summed over subfiles; shape (K_R, S)."""
    return block_energy(F, n_r).sum(axis=1).T


# ----------------------------------------------------------------------------
# Weights and coefficients
# ----------------------------------------------------------------------------

@dataclass
class ReweightState:
    mu: np.ndarray  # (K_U, K_R)
    theta: np.ndarray  # (K_R,)
    c1: float
    c2: float
    tau1: float
    tau2: float
    mu_frozen: bool = False  # sole-precoder baseline keeps mu at zero


def update_weights(F: np.ndarray, cfg: ScenarioConfig, mu_frozen: bool = False) -> ReweightState:
    """Reweighted-l1 weights from the current precoders."""
    E = link_energy(F, cfg.antennas_errh)  # (K_R, S)
    c1, c2 = cfg.c1, cfg.c2
    mu = c1 / (E.T + cfg.tau1)
    if mu_frozen:
        mu = np.zeros_like(mu)
    theta = c2 / (E.sum(axis=1) + cfg.tau2)
    return ReweightState(mu=mu, theta=theta, c1=c1, c2=c2, tau1=cfg.tau1, tau2=cfg.tau2,
                         mu_frozen=mu_frozen)


@dataclass
class ApproxCoefficients:
    upsilon: np.ndarray  # (K_R,) beta + theta * (P_a - P_s)
    vartheta: np.ndarray  # (K_R, S) mu * missing-rate sum
    tau: np.ndarray  # (K_R, S) upsilon + alpha * vartheta
    q: np.ndarray  # (K_R, S, M) per-rate power coefficient
    b: float  # rate-independent part of the approximated power
    energy: np.ndarray  # (K_R, S) link energies the coefficients were built at
    mu: np.ndarray  # (K_U, K_R)

    def approx_power(self, R: np.ndarray) -> float:
        """b + sum q R, the approximated total power at fixed precoders."""
        return self.b + float(np.einsum("ism,sm->", self.q, R))


def build_coefficients(state: ReweightState, R: np.ndarray, scenario: Scenario,
                       F: np.ndarray) -> ApproxCoefficients:
    cfg = scenario.cfg
    c = scenario.cache.c  # (K_R, S, M)
    beta = cfg.per_errh("amplifier_slope")
    alpha = cfg.per_errh("fronthaul_slope")
    p_delta = cfg.per_errh("active_power") - cfg.per_errh("sleep_power")
    E = link_energy(F, scenario.n_r)
    upsilon = beta + state.theta * p_delta
    missing = np.einsum("ism,sm->is", 1 - c, R)
    vartheta = state.mu.T * missing
    tau = upsilon[:, None] + alpha[:, None] * vartheta
    q = (alpha[:, None] * state.mu.T * E)[:, :, None] * (1 - c)
    b = float(np.sum(cfg.per_errh("sleep_power"))) + float(np.sum(upsilon[:, None] * E))
    return ApproxCoefficients(upsilon=upsilon, vartheta=vartheta, tau=tau, q=q, b=b, energy=E,
                              mu=state.mu.copy())


def objective_p2(F: np.ndarray, R: np.ndarray, state: ReweightState, scenario: Scenario) -> float:
    """Sum rate minus eta times the reweighted power approximation."""
    co = build_coefficients(state, R, scenario, F)
    p_s = float(np.sum(scenario.cfg.per_errh("sleep_power")))
    return float(np.sum(R)) - scenario.cfg.eta * (float(np.sum(co.tau * co.energy)) + p_s)


def objective_p3(F: np.ndarray, coeffs: ApproxCoefficients, scenario: Scenario) -> float:
    """eta * sum tau * link energy, the precoder-step objective."""
    E = link_energy(F, scenario.n_r)
    return scenario.cfg.eta * float(np.sum(coeffs.tau * E))


def approx_fronthaul_load(F: np.ndarray, R: np.ndarray, state: ReweightState,
                          scenario: Scenario) -> np.ndarray:
    """Energy-weighted fronthaul load sum vartheta * energy per eRRH."""
    co = build_coefficients(state, R, scenario, F)
    return np.sum(co.vartheta * co.energy, axis=1)


# ----------------------------------------------------------------------------
# Rate LP
# ----------------------------------------------------------------------------

@dataclass
class RateLpResult:
    R: np.ndarray | None
    status: str
    objective: float  # sum R - eta (b + sum q R)
    clamped: list[tuple[int, int]] = field(default_factory=list)
    solution: Solution | None = None


def solve_rate_lp(coeffs: ApproxCoefficients, g: np.ndarray, scenario: Scenario,
                  association: np.ndarray | None = None, approx_row: bool = True,
                  x0: np.ndarray | None = None,
                  settings: SolverSettings | None = None) -> RateLpResult:
    """Maximise sum R - eta (b + sum q R) over the rate box and fronthaul rows.

    Rows: the energy-weighted fronthaul load sum mu E (1-c) R <= C_i (when
    ``approx_row``) and, when ``association`` is given, the exact load
    sum a (1-c) R <= C_i.  Bounds: R_QoS <= R <= min(cap, g).  A subfile
    whose g has fallen below R_QoS is pinned to g with a warning.
    """
    cfg = scenario.cfg
    S, M = g.shape
    c = scenario.cache.c
    cap = cfg.per_errh("fronthaul_capacity")
    lower = np.full((S, M), cfg.qos_rate)
    upper = np.minimum(cfg.subfile_rate_cap, g)
    clamped = [tuple(int(v) for v in idx) for idx in zip(*np.nonzero(upper < lower))]
    if clamped:
        log.warning("rate bound below QoS for subfiles %s; pinning to g", clamped)
        lower = np.minimum(lower, upper)
    rows, rhs = [], []
    if approx_row:
        w = (coeffs.mu.T * coeffs.energy)[:, :, None] * (1 - c)  # (K_R, S, M)
        rows.append(w.reshape(len(cap), -1))
        rhs.append(cap)
    if association is not None:
        w = np.asarray(association, float).T[:, :, None] * (1 - c)
        rows.append(w.reshape(len(cap), -1))
        rhs.append(cap)
    A = np.vstack(rows) if rows else None
    bvec = np.concatenate(rhs) if rhs else None
    net = 1.0 - cfg.eta * coeffs.q.sum(axis=0)  # (S, M)
    lp = LinearProgram(c=-net.reshape(-1), A_ub=A, b_ub=bvec, lower=lower.reshape(-1),
                       upper=upper.reshape(-1))
    sol = solve_lp(lp, settings, x0=None if x0 is None else np.asarray(x0).reshape(-1))
    if sol.x is None:
        return RateLpResult(R=None, status=sol.status, objective=math.nan, clamped=clamped,
                            solution=sol)
    R = np.clip(sol.x.reshape(S, M), lower, upper)
    obj = float(np.sum(R)) - cfg.eta * coeffs.approx_power(R)
    return RateLpResult(R=R, status=sol.status, objective=obj, clamped=clamped, solution=sol)


# ----------------------------------------------------------------------------
# Surrogate
# ----------------------------------------------------------------------------

@dataclass
class Surrogate:
    """Concave minorant of every SIC rate around ``point``.

    In noise-whitened coordinates, for subfile (s, m)::

        Gamma(F) = const + 2 Re tr(V^H F_sm) - sum_b tr(F_b^H G F_b)   [nats]

    where b ranges over the precoders that appear in Phi_sm (own subfiles
    q >= m and every precoder of the other slots), V = H^H Xi^-1 Pi and
    G = H^H (Xi^-1 - Phi^-1) H, all evaluated at the expansion point.
    """
    point: np.ndarray
    g_nats: np.ndarray  # (S, M)
    const: np.ndarray  # (S, M), nats
    V: np.ndarray  # (S, M, N_R, d)
    G: np.ndarray  # (S, M, N_R, N_R), Hermitian PSD
    Pi: np.ndarray  # (S, M, N_u, d), whitened
    Xi: np.ndarray  # (S, M, N_u, N_u), whitened
    Phi: np.ndarray  # (S, M, N_u, N_u), whitened
    penalty: np.ndarray  # (S, M, N_u, N_u), Xi^-1 - Phi^-1, whitened
    bandwidth: float
    notes: list[str] = field(default_factory=list)

    @property
    def g(self) -> np.ndarray:
        """Rates at the expansion point in Mb/s."""
        return self.g_nats * self.bandwidth / LN2

    def phi_set(self, s: int, m: int) -> list[tuple[int, int]]:
        S, M = self.g_nats.shape
        own = [(s, q) for q in range(m, M)]
        return own + [(t, q) for t in range(S) if t != s for q in range(M)]

    def evaluate_nats(self, F: np.ndarray) -> np.ndarray:
        S, M = self.g_nats.shape
        quad = np.einsum("tqrd,smrk,tqkd->smtq", F.conj(), self.G, F).real  # (S,M,S,M)
        out = self.const + 2.0 * np.einsum("smrd,smrd->sm", self.V.conj(), F).real
        for s in range(S):
            for m in range(M):
                out[s, m] -= sum(quad[s, m, t, q] for t, q in self.phi_set(s, m))
        return out

    def evaluate(self, F: np.ndarray) -> np.ndarray:
        """Gamma for every subfile, in Mb/s."""
        return self.evaluate_nats(F) * self.bandwidth / LN2


def _whitened_channels(scenario: Scenario) -> np.ndarray:
    ch = scenario.channels
    out = np.empty_like(ch.H)
    for k in range(ch.H.shape[0]):
        L = np.linalg.cholesky(ch.noise_cov[k])
        out[k] = np.linalg.solve(L, ch.H[k])
    return out


def build_surrogate(F: np.ndarray, scenario: Scenario) -> Surrogate:
    S, M, N_R, d = F.shape
    Hw = _whitened_channels(scenario)
    N_u = Hw.shape[1]
    eye_u = np.eye(N_u)
    eye_d = np.eye(d)
    notes: list[str] = []
    g = np.zeros((S, M))
    const = np.zeros((S, M))
    V = np.zeros((S, M, N_R, d), complex)
    G = np.zeros((S, M, N_R, N_R), complex)
    Pi = np.zeros((S, M, N_u, d), complex)
    Xi = np.zeros((S, M, N_u, N_u), complex)
    Phi = np.zeros((S, M, N_u, N_u), complex)
    pen = np.zeros((S, M, N_u, N_u), complex)
    for s in range(S):
        H = Hw[scenario.ue_of_slot(s)]
        Y = np.einsum("ur,smrd->smud", H, F)
        C = np.einsum("smud,smvd->smuv", Y, Y.conj())
        others = C.sum(axis=(0, 1)) - C[s].sum(axis=0)
        for m in range(M):
            X = eye_u + others + C[s, m + 1:].sum(axis=0)
            X = 0.5 * (X + X.conj().T)
            try:
                np.linalg.cholesky(X)
            except np.linalg.LinAlgError:
                X = X + 1e-10 * eye_u
                notes.append(f"ridge on interference covariance ({s},{m})")
            P = Y[s, m]
            XiP = np.linalg.solve(X, P)
            B = P.conj().T @ XiP
            Mm = eye_d + 0.5 * (B + B.conj().T)
            Minv = np.linalg.inv(Mm)
            Minv = 0.5 * (Minv + Minv.conj().T)
            A = XiP @ Minv @ XiP.conj().T
            A = 0.5 * (A + A.conj().T)
            v = H.conj().T @ XiP
            Gm = v @ Minv @ v.conj().T
            _, logdet = np.linalg.slogdet(Mm)
            g[s, m] = max(0.0, float(logdet))
            const[s, m] = g[s, m] - float(np.trace(B).real) - float(np.trace(A).real)
            V[s, m] = v
            G[s, m] = 0.5 * (Gm + Gm.conj().T)
            Pi[s, m] = P
            Xi[s, m] = X
            Phi[s, m] = X + P @ P.conj().T
            pen[s, m] = A
    return Surrogate(point=F.copy(), g_nats=g, const=const, V=V, G=G, Pi=Pi, Xi=Xi, Phi=Phi,
                     penalty=pen, bandwidth=scenario.cfg.bandwidth, notes=notes)


# ----------------------------------------------------------------------------
# Precoder programs
# ----------------------------------------------------------------------------

@dataclass
class FreezeRow:
    """Keep the energy of slot ``slot`` at eRRH ``errh`` at or below ``bound``."""
    slot: int
    errh: int
    bound: float


def _errh_masks(K_R: int, n_r: int) -> np.ndarray:
    """(K_R, 2 N_R) 0/1 masks selecting eRRH rows of a real-embedded column."""
    N_R = K_R * n_r
    masks = np.zeros((K_R, 2 * N_R))
    for i in range(K_R):
        masks[i, i * n_r:(i + 1) * n_r] = 1.0
        masks[i, N_R + i * n_r:N_R + (i + 1) * n_r] = 1.0
    return masks


def _block_slot(S: int, M: int, d: int) -> np.ndarray:
    return np.repeat(np.arange(S), M * d)


def _common_rows(scenario: Scenario, vartheta: np.ndarray | None, freeze, n_total: int):
    """Power, energy-weighted fronthaul and freeze rows (all diagonal blocks)."""
    cfg = scenario.cfg
    S, M, N_R, d = scenario.stack_shape
    K_R, n_r = scenario.K_R, scenario.n_r
    nb, bs = S * M * d, 2 * N_R
    masks = _errh_masks(K_R, n_r)
    slot = _block_slot(S, M, d)
    idx = np.arange(bs)
    blocks, rhs, labels = [], [], []

    def diag_row(weights_per_block, mask):
        P = np.zeros((nb, bs, bs))
        P[:, idx, idx] = 2.0 * weights_per_block[:, None] * mask[None, :]
        return P

    power = cfg.per_errh("tx_power_budget")
    for i in range(K_R):
        blocks.append(diag_row(np.ones(nb), masks[i]))
        rhs.append(power[i])
        labels.append(f"power[{i}]")
    if vartheta is not None:
        cap = cfg.per_errh("fronthaul_capacity")
        for i in range(K_R):
            if np.any(vartheta[i] > 0):
                blocks.append(diag_row(vartheta[i][slot], masks[i]))
                rhs.append(cap[i])
                labels.append(f"fronthaul[{i}]")
    for fr in freeze or ():
        blocks.append(diag_row((slot == fr.slot).astype(float), masks[fr.errh]))
        rhs.append(fr.bound)
        labels.append(f"freeze[{fr.slot},{fr.errh}]")
    lin = np.zeros((len(rhs), n_total))
    return blocks, lin, rhs, labels


def _rate_rows(sur: Surrogate, R: np.ndarray, scenario: Scenario, n_total: int):
    S, M, N_R, d = sur.V.shape
    nb, bs = S * M * d, 2 * N_R
    W = scenario.cfg.bandwidth
    blocks, lins, rhs, labels = [], [], [], []
    for s in range(S):
        for m in range(M):
            P = np.zeros((nb, bs, bs))
            Gh = 2.0 * embed_hermitian(sur.G[s, m])
            for t, q in sur.phi_set(s, m):
                start = (t * M + q) * d
                P[start:start + d] = Gh
            lin = np.zeros(n_total)
            start = (s * M + m) * d * bs
            lin[start:start + d * bs] = -2.0 * real_embed(sur.V[s, m])
            blocks.append(P)
            lins.append(lin)
            rhs.append(sur.const[s, m] - R[s, m] * LN2 / W)
            labels.append(f"rate[{s},{m}]")
    return blocks, lins, rhs, labels


def build_precoder_qcqp(sur: Surrogate, coeffs: ApproxCoefficients, R: np.ndarray,
                        scenario: Scenario, freeze: list[FreezeRow] | None = None) -> ConvexQcqp:
    """Minimum approximated-power precoders subject to the surrogate rate bounds."""
    cfg = scenario.cfg
    S, M, N_R, d = scenario.stack_shape
    nb, bs = S * M * d, 2 * N_R
    n = nb * bs
    masks = _errh_masks(scenario.K_R, scenario.n_r)
    slot = _block_slot(S, M, d)
    obj_diag = 2.0 * cfg.eta * np.einsum("ib,ik->bk", coeffs.tau[:, slot], masks)
    P0 = np.zeros((nb, bs, bs))
    P0[:, np.arange(bs), np.arange(bs)] = obj_diag
    cb, cl, cr, labels = _common_rows(scenario, coeffs.vartheta, freeze, n)
    rb, rl, rr, rlab = _rate_rows(sur, R, scenario, n)
    return ConvexQcqp(
        n_blocks=nb, block_size=bs, n_free=0,
        objective_linear=np.zeros(n),
        constraint_linear=np.vstack([cl, np.array(rl)]),
        rhs=np.array(cr + rr),
        objective_blocks=P0,
        constraint_blocks=np.stack(cb + rb),
        labels=labels + rlab,
    )


def build_feasibility_qcqp(sur: Surrogate, coeffs: ApproxCoefficients, R: np.ndarray,
                           scenario: Scenario, t_bounds: tuple[float, float],
                           freeze: list[FreezeRow] | None = None) -> ConvexQcqp:
    """Maximise t subject to Gamma_sm(F) >= t R_sm, power and fronthaul rows.

    Posed as minimising -t; ``t_bounds`` must bracket the optimum (finite so
    the barrier Hessian stays definite in t).
    """
    S, M, N_R, d = scenario.stack_shape
    nb, bs = S * M * d, 2 * N_R
    n = nb * bs + 1
    W = scenario.cfg.bandwidth
    cb, cl, cr, labels = _common_rows(scenario, coeffs.vartheta, freeze, n)
    rb, rl, rr, rlab = _rate_rows(sur, R, scenario, n)
    rl = np.array(rl)
    rl[:, -1] = R.reshape(-1) * LN2 / W
    rr = [v + r * LN2 / W for v, r in zip(rr, R.reshape(-1))]  # move R back: Gamma >= t R
    obj = np.zeros(n)
    obj[-1] = -1.0
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    lower[-1], upper[-1] = t_bounds
    return ConvexQcqp(
        n_blocks=nb, block_size=bs, n_free=1,
        objective_linear=obj,
        constraint_linear=np.vstack([cl, rl]),
        rhs=np.array(cr + rr),
        constraint_blocks=np.stack(cb + rb),
        lower=lower, upper=upper,
        labels=labels + rlab,
    )


def rate_upper_bound(scenario: Scenario) -> np.ndarray:
    """Single-user capacity bound per UE in Mb/s (full power from every eRRH)."""
    cfg = scenario.cfg
    Hw = _whitened_channels(scenario)
    total = float(np.sum(cfg.per_errh("tx_power_budget")))
    out = np.empty(Hw.shape[0])
    for k, H in enumerate(Hw):
        lam = np.linalg.eigvalsh(H @ H.conj().T)
        out[k] = cfg.bandwidth * float(np.sum(np.log2(1.0 + total * np.maximum(lam, 0.0))))
    return out


def rates_of(F: np.ndarray, scenario: Scenario) -> np.ndarray:
    return achievable_rates(F, scenario)
