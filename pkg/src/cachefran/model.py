"""Closed-form evaluation of association, fronthaul load, SIC rates and power.

Array conventions
-----------------
precoder stack ``F``
    complex array ``(S, M, N_R, d)``; ``F[s, m]`` precodes subfile ``m`` of
    the file requested in slot ``s`` (slot ``s`` belongs to UE ``s``).
rates ``R``
    real array ``(S, M)`` in Mb/s.
association ``a``
    int array ``(K_U, K_R)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scenario import CacheState, Scenario

__all__ = [
    "block_energy",
    "errh_block",
    "association_from_precoders",
    "fronthaul_rate",
    "fronthaul_rates",
    "fronthaul_demand",
    "interference_covariance",
    "achievable_rate",
    "achievable_rates",
    "log2det_hpd",
    "PowerBreakdown",
    "total_power",
    "objective_p1",
    "FeasibilityReport",
    "check_feasibility",
]


def errh_block(F: np.ndarray, i: int, n_r: int) -> np.ndarray:
    """Rows of eRRH ``i`` (0-based) of every precoder in the stack."""
    return F[..., i * n_r:(i + 1) * n_r, :]


def block_energy(F: np.ndarray, n_r: int) -> np.ndarray:
    """trace(F^i F^iH) for every (slot, subfile, eRRH); shape (S, M, K_R)."""
    S, M, N_R, d = F.shape
    per_row = np.sum(np.abs(F) ** 2, axis=-1)  # (S, M, N_R)
    return per_row.reshape(S, M, N_R // n_r, n_r).sum(axis=-1)


def association_from_precoders(F: np.ndarray, n_r: int, threshold: float = 1e-6) -> np.ndarray:
    """a[k, i] = 1 iff UE k's precoders carry more than ``threshold`` W at eRRH i."""
    energy = block_energy(F, n_r).sum(axis=1)  # (S, K_R)
    return (energy > threshold).astype(int)


def fronthaul_demand(R: np.ndarray, cache: CacheState) -> np.ndarray:
    """Missing-subfile rate sum per (eRRH, slot): sum_m (1 - c) R, shape (K_R, S)."""
    return np.einsum("ism,sm->is", 1 - cache.c, R)


def fronthaul_rates(a: np.ndarray, R: np.ndarray, cache: CacheState) -> np.ndarray:
    """Fronthaul load of every eRRH in Mb/s."""
    demand = fronthaul_demand(R, cache)  # (K_R, S)
    return np.einsum("si,is->i", a, demand)


def fronthaul_rate(a: np.ndarray, R: np.ndarray, cache: CacheState, i: int) -> float:
    return float(fronthaul_rates(a, R, cache)[i])


# ----------------------------------------------------------------------------
# Rates
# ----------------------------------------------------------------------------

def log2det_hpd(A: np.ndarray) -> float:
    """log2 of the determinant of a Hermitian positive definite matrix."""
    L = np.linalg.cholesky(A)
    return 2.0 * float(np.sum(np.log(np.real(np.diag(L))))) / math.log(2.0)


def _own_outer(F: np.ndarray, H_k: np.ndarray) -> np.ndarray:
    Y = np.einsum("ur,smrd->smud", H_k, F)
    return np.einsum("smud,smvd->smuv", Y, Y.conj())  # (S, M, N_u, N_u)


def interference_covariance(F: np.ndarray, H_k: np.ndarray, noise_cov: np.ndarray,
                            slot: int, m: int) -> np.ndarray:
    """Residual interference-plus-noise covariance after SIC of subfiles 0..m."""
    C = _own_outer(F, H_k)
    Xi = noise_cov.astype(complex).copy()
    Xi += C[slot, m + 1:].sum(axis=0)
    others = [s for s in range(F.shape[0]) if s != slot]
    if others:
        Xi += C[others].sum(axis=(0, 1))
    return 0.5 * (Xi + Xi.conj().T)


def achievable_rate(F: np.ndarray, H_k: np.ndarray, noise_cov: np.ndarray, slot: int, m: int,
                    bandwidth: float = 1.0) -> float:
    """W * log2|I + Pi Pi^H Xi^{-1}| evaluated as log2|Xi + Pi Pi^H| - log2|Xi|."""
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(H_k))):
        raise ValueError("non-finite channel or precoder entries")
    Xi = interference_covariance(F, H_k, noise_cov, slot, m)
    Pi = H_k @ F[slot, m]
    Phi = Xi + Pi @ Pi.conj().T
    Phi = 0.5 * (Phi + Phi.conj().T)
    return max(0.0, bandwidth * (log2det_hpd(Phi) - log2det_hpd(Xi)))


def achievable_rates(F: np.ndarray, scenario: Scenario) -> np.ndarray:
    """All SIC rate bounds g[s, m] in Mb/s."""
    ch = scenario.channels
    S, M = F.shape[:2]
    W = scenario.cfg.bandwidth
    if not np.all(np.isfinite(F)):
        raise ValueError("non-finite precoder entries")
    g = np.zeros((S, M))
    for s in range(S):
        k = scenario.ue_of_slot(s)
        C = _own_outer(F, ch.H[k])
        total = ch.noise_cov[k] + C.sum(axis=(0, 1))
        # Phi_{s,m} = total - sum_{q<m} C[s,q]; Xi_{s,m} = Phi_{s,m} - C[s,m]
        Phi = total.copy()
        for m in range(M):
            Xi = Phi - C[s, m]
            g[s, m] = max(0.0, W * (log2det_hpd(0.5 * (Phi + Phi.conj().T))
                                    - log2det_hpd(0.5 * (Xi + Xi.conj().T))))
            Phi = Xi
    return g


# ----------------------------------------------------------------------------
# Power
# ----------------------------------------------------------------------------

@dataclass
class PowerBreakdown:
    tx: np.ndarray  # transmit power per eRRH, W
    errh: np.ndarray  # eRRH consumption per eRRH, W
    fronthaul: np.ndarray  # fronthaul power per eRRH, W
    active: np.ndarray  # indicator per eRRH
    total: float
    busy: float
    budget_violation: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def total_power(F: np.ndarray, a: np.ndarray, R: np.ndarray, scenario: Scenario,
                threshold: float | None = None) -> PowerBreakdown:
    cfg = scenario.cfg
    threshold = cfg.association_threshold if threshold is None else threshold
    tx = block_energy(F, scenario.n_r).sum(axis=(0, 1))
    active = (tx > threshold).astype(int)
    beta = cfg.per_errh("amplifier_slope")
    p_active = cfg.per_errh("active_power")
    p_sleep = cfg.per_errh("sleep_power")
    alpha = cfg.per_errh("fronthaul_slope")
    errh = np.where(active == 1, beta * tx + p_active, p_sleep)
    fh = alpha * fronthaul_rates(a, R, scenario.cache)
    total = float(np.sum(errh + fh))
    busy = total - float(np.sum(p_sleep))
    return PowerBreakdown(tx=tx, errh=errh, fronthaul=fh, active=active, total=total,
                          busy=busy, budget_violation=tx > cfg.per_errh("tx_power_budget"))


def objective_p1(F: np.ndarray, a: np.ndarray, R: np.ndarray, scenario: Scenario) -> float:
    """Sum rate minus eta times total power."""
    return float(np.sum(R)) - scenario.cfg.eta * total_power(F, a, R, scenario).total


# ----------------------------------------------------------------------------
# Feasibility
# ----------------------------------------------------------------------------

@dataclass
class FeasibilityReport:
    slacks: dict[str, np.ndarray]
    tol: float

    @property
    def violations(self) -> list[tuple[str, tuple, float]]:
        out = []
        for name, slack in self.slacks.items():
            for idx in zip(*np.nonzero(slack < -self.tol)):
                out.append((name, tuple(int(v) for v in idx), float(slack[idx])))
        return out

    @property
    def feasible(self) -> bool:
        return not self.violations

    @property
    def worst(self) -> float:
        return min(float(np.min(v)) for v in self.slacks.values() if v.size)


def check_feasibility(F: np.ndarray, R: np.ndarray, scenario: Scenario, tol: float = 1e-6,
                      association: np.ndarray | None = None) -> FeasibilityReport:
    """Slack of every constraint of the joint problem; negative means violated.

    Families: ``rate_min`` / ``rate_max`` (QoS and subfile cap),
    ``fronthaul`` (capacity with the thresholded association),
    ``rate_bound`` (g - R) and ``power`` (budget - transmit power).
    """
    cfg = scenario.cfg
    a = association_from_precoders(F, scenario.n_r, cfg.association_threshold) \
        if association is None else association
    g = achievable_rates(F, scenario)
    tx = block_energy(F, scenario.n_r).sum(axis=(0, 1))
    slacks = {
        "rate_min": R - cfg.qos_rate,
        "rate_max": cfg.subfile_rate_cap - R,
        "fronthaul": cfg.per_errh("fronthaul_capacity") - fronthaul_rates(a, R, scenario.cache),
        "rate_bound": g - R,
        "power": cfg.per_errh("tx_power_budget") - tx,
    }
    return FeasibilityReport(slacks=slacks, tol=tol)
