"""Log-barrier interior-point solver for convex QCQPs and LPs.

Problems are stated over a real vector ``x`` split into ``n_blocks``
contiguous blocks of length ``block_size`` followed by ``n_free`` scalar
variables.  Every quadratic form is block diagonal with the same block
partition; free variables enter linearly only::

    minimize    1/2 x'P0 x + q0'x
    subject to  1/2 x'P_j x + q_j'x <= b_j      j = 1..m
                lower <= x <= upper

Complex matrix variables are mapped to this layout by :func:`real_embed`.
The Newton system is ``blockdiag(D) + U U'`` with ``U`` holding the scaled
constraint gradients; it is solved through the Woodbury identity on the
block inverses (blocks with identical Hessian terms share one inverse),
with iterative refinement and a dense Cholesky fallback.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.optimize import nnls

log = logging.getLogger(__name__)

__all__ = [
    "real_embed",
    "real_unembed",
    "embed_hermitian",
    "embed_linear",
    "SolverSettings",
    "ConvexQcqp",
    "LinearProgram",
    "Solution",
    "solve_qcqp",
    "solve_lp",
    "verify_kkt",
    "KktReport",
    "dump_problem",
]


# ----------------------------------------------------------------------------
# Real embedding
# ----------------------------------------------------------------------------

def real_embed(F: np.ndarray) -> np.ndarray:
    """Stack of complex (..., N, d) matrices -> real vector.

    Each column ``f`` becomes one block ``[Re f, Im f]``; blocks follow the
    C order of the leading axes and then the column index.
    """
    Ft = np.moveaxis(np.asarray(F), -1, -2)  # (..., d, N)
    return np.stack([Ft.real, Ft.imag], axis=-2).reshape(-1).astype(float)


def real_unembed(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`real_embed` for a stack of the given complex shape."""
    *lead, N, d = shape
    blocks = np.asarray(x[: int(np.prod(shape)) * 2]).reshape(*lead, d, 2, N)
    Ft = blocks[..., 0, :] + 1j * blocks[..., 1, :]
    return np.moveaxis(Ft, -2, -1)


def embed_hermitian(G: np.ndarray) -> np.ndarray:
    """Real symmetric matrix with f^H G f = x' Ghat x for x = [Re f, Im f]."""
    G = 0.5 * (G + G.conj().T)
    Gr, Gi = G.real, G.imag
    return np.block([[Gr, -Gi], [Gi, Gr]])


def embed_linear(C: np.ndarray) -> np.ndarray:
    """Real vector c with Re tr(C^H F) = c' real_embed(F) for one matrix F."""
    return real_embed(C)


# ----------------------------------------------------------------------------
# Problem containers
# ----------------------------------------------------------------------------

@dataclass
class SolverSettings:
    t0: float | None = None  # None: choose from the starting point
    mu: float = 20.0
    newton_tol: float = 1e-14  # on lambda^2 / 2
    max_newton: int = 100  # per centering step
    max_centering: int = 80
    gap_abs: float = 1e-10
    gap_rel: float = 1e-9
    feas_tol: float = 1e-9
    psd_ridge: float = 1e-10
    phase1: bool = True

    def __post_init__(self):
        for name in ("mu", "newton_tol", "max_newton", "max_centering", "gap_abs", "gap_rel",
                     "feas_tol", "psd_ridge"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mu <= 1:
            raise ValueError("mu must exceed 1")
        if self.t0 is not None and self.t0 <= 0:
            raise ValueError("t0 must be positive")


@dataclass
class ConvexQcqp:
    n_blocks: int
    block_size: int
    n_free: int
    objective_linear: np.ndarray
    constraint_linear: np.ndarray  # (m, n)
    rhs: np.ndarray  # (m,)
    objective_blocks: np.ndarray | None = None  # (nb, bs, bs)
    constraint_blocks: np.ndarray | None = None  # (m, nb, bs, bs)
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    objective_constant: float = 0.0
    labels: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        nb, bs = self.n_blocks, self.block_size
        n = self.n
        m = len(self.rhs)
        self.objective_linear = np.asarray(self.objective_linear, dtype=float).reshape(n)
        self.constraint_linear = np.asarray(self.constraint_linear, dtype=float).reshape(m, n)
        self.rhs = np.asarray(self.rhs, dtype=float)
        if self.objective_blocks is None:
            self.objective_blocks = np.zeros((nb, bs, bs))
        if self.constraint_blocks is None:
            self.constraint_blocks = np.zeros((m, nb, bs, bs))
        if self.objective_blocks.shape != (nb, bs, bs):
            raise ValueError("objective_blocks has the wrong shape")
        if self.constraint_blocks.shape != (m, nb, bs, bs):
            raise ValueError("constraint_blocks has the wrong shape")
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        for arr in (self.objective_linear, self.constraint_linear, self.rhs,
                    self.objective_blocks, self.constraint_blocks):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite problem data")
        if not self.labels:
            self.labels = [f"c{j}" for j in range(m)]

    @property
    def n(self) -> int:
        return self.n_blocks * self.block_size + self.n_free

    @property
    def m(self) -> int:
        return len(self.rhs)

    @classmethod
    def dense(cls, P0, q0, Ps, qs, b, lower=None, upper=None) -> "ConvexQcqp":
        """Convenience constructor: one block holding all variables."""
        q0 = np.asarray(q0, float)
        n = q0.size
        P0 = np.zeros((n, n)) if P0 is None else np.asarray(P0, float)
        Ps = [np.zeros((n, n)) if P is None else np.asarray(P, float) for P in Ps]
        blocks = np.stack(Ps)[:, None] if Ps else np.zeros((0, 1, n, n))
        return cls(n_blocks=1, block_size=n, n_free=0, objective_linear=q0,
                   constraint_linear=np.asarray(qs, float).reshape(len(Ps), n), rhs=b,
                   objective_blocks=P0[None], constraint_blocks=blocks,
                   lower=lower, upper=upper)

    def validate_psd(self, ridge: float = 1e-10) -> None:
        """Check every block is symmetric PSD; repair marginal failures in place."""
        def fix(stack: np.ndarray, what: str) -> None:
            if stack.size == 0:
                return
            flat = stack.reshape(-1, self.block_size, self.block_size)
            asym = np.max(np.abs(flat - np.swapaxes(flat, -1, -2)), initial=0.0)
            scale = max(1.0, float(np.max(np.abs(flat), initial=0.0)))
            if asym > 1e-9 * scale:
                raise ValueError(f"{what}: block is not symmetric")
            flat[:] = 0.5 * (flat + np.swapaxes(flat, -1, -2))
            nz = np.flatnonzero(np.any(flat != 0.0, axis=(1, 2)))
            if nz.size == 0:
                return
            eye = np.eye(self.block_size)
            scales = np.max(np.abs(flat[nz]), axis=(1, 2))
            try:
                np.linalg.cholesky(flat[nz] + (ridge * scales)[:, None, None] * eye)
                return
            except np.linalg.LinAlgError:
                pass
            for idx, sc in zip(nz, scales):
                w, V = np.linalg.eigh(flat[idx])
                if w[0] < -1e-7 * sc:
                    raise ValueError(f"{what}: block is not PSD (min eig {w[0]:.3e})")
                if w[0] < 0:
                    flat[idx] = (V * np.maximum(w, 0.0)) @ V.T + ridge * sc * eye
                    self.notes.append(f"{what}: ridge {ridge * sc:.1e} added to block {idx}")
        fix(self.objective_blocks, "objective")
        fix(self.constraint_blocks, "constraints")


@dataclass
class LinearProgram:
    """minimize c'x  s.t.  A_ub x <= b_ub,  lower <= x <= upper."""
    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.size
        if self.A_ub is None:
            self.A_ub = np.zeros((0, n))
            self.b_ub = np.zeros(0)
        self.A_ub = np.asarray(self.A_ub, dtype=float).reshape(-1, n)
        self.b_ub = np.asarray(self.b_ub, dtype=float)
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.A_ub))
                and np.all(np.isfinite(self.b_ub))):
            raise ValueError("non-finite LP data")


@dataclass
class Solution:
    x: np.ndarray | None
    objective: float
    status: str  # "optimal", "infeasible", "iteration-limit"
    multipliers: np.ndarray | None = None
    lower_multipliers: np.ndarray | None = None
    upper_multipliers: np.ndarray | None = None
    centering_steps: int = 0
    newton_steps: int = 0
    gap: float = math.inf
    barrier_trace: list[list[float]] = field(default_factory=list)
    objective_trace: list[float] = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


# ----------------------------------------------------------------------------
# Barrier machinery
# ----------------------------------------------------------------------------

class _Problem:
    """Vectorized evaluation of objective, constraints and Newton systems."""

    def __init__(self, prob: ConvexQcqp):
        self.p = prob
        self.nb, self.bs, self.nf = prob.n_blocks, prob.block_size, prob.n_free
        self.nq = self.nb * self.bs
        self.n = prob.n
        self.m = prob.m
        self.P0 = prob.objective_blocks
        self.q0 = prob.objective_linear
        self.P = prob.constraint_blocks
        self.Q = prob.constraint_linear
        self.b = prob.rhs
        self.lo = prob.lower
        self.hi = prob.upper
        self.has_lo = np.isfinite(self.lo)
        self.has_hi = np.isfinite(self.hi)
        self.n_bounds = int(self.has_lo.sum() + self.has_hi.sum())
        self.fallbacks = 0
        # split quadratic constraints into diagonal ones (kept as vectors) and dense ones
        ar = np.arange(self.bs)
        if self.m and self.nb:
            nz = np.any(self.P != 0.0, axis=(2, 3))  # (m, nb)
            quad = np.any(nz, axis=1)
            off = self.P.copy()
            off[:, :, ar, ar] = 0.0
            diag = ~np.any(off != 0.0, axis=(1, 2, 3))
        else:
            quad = diag = np.zeros(self.m, dtype=bool)
        self.diag_idx = np.flatnonzero(quad & diag)
        self.dense_idx = np.flatnonzero(quad & ~diag)
        self.Pd = self.P[self.diag_idx][:, :, ar, ar].reshape(self.diag_idx.size, self.nq) \
            if self.diag_idx.size else np.zeros((0, self.nq))
        self.Pq = self.P[self.dense_idx]
        self._find_twins()
        if self.nb:
            off0 = self.P0.copy()
            off0[:, ar, ar] = 0.0
            self.P0_is_diag = not np.any(off0)
            self.P0d = self.P0[:, ar, ar].reshape(-1)
        else:
            self.P0_is_diag = True
            self.P0d = np.zeros(0)

    def _find_twins(self):
        """Group blocks whose Hessian contributions coincide; each group is factored once."""
        self.rep = np.arange(self.nb)
        self.rep_of = np.arange(self.nb)
        if not self.nb:
            return
        in_blocks = slice(0, self.nq)
        if np.any(self.has_lo[in_blocks]) or np.any(self.has_hi[in_blocks]):
            return
        seen: dict[bytes, int] = {}
        rep, rep_of = [], []
        for b in range(self.nb):
            key = np.ascontiguousarray(self.P0[b]).tobytes() + np.ascontiguousarray(self.P[:, b]).tobytes()
            if key not in seen:
                seen[key] = len(rep)
                rep.append(b)
            rep_of.append(seen[key])
        self.rep = np.array(rep)
        self.rep_of = np.array(rep_of)

    def blocks(self, x):
        return x[: self.nq].reshape(self.nb, self.bs)

    def objective(self, x):
        grad = self.q0.copy()
        val = float(self.q0 @ x) + self.p.objective_constant
        if self.nb:
            if self.P0_is_diag:
                Px = self.P0d * x[: self.nq]
            else:
                Px = np.einsum("bkl,bl->bk", self.P0, self.blocks(x)).reshape(-1)
            val += 0.5 * float(Px @ x[: self.nq])
            grad[: self.nq] += Px
        return val, grad

    def constraints(self, x, need_grad=True):
        """Values f_j(x) = 1/2 x'P_j x + q_j'x - b_j and (optionally) gradients."""
        vals = self.Q @ x - self.b
        grads = self.Q.copy() if need_grad else None
        if self.diag_idx.size:
            xq = x[: self.nq]
            Px = self.Pd * xq
            vals[self.diag_idx] += 0.5 * (Px @ xq)
            if need_grad:
                grads[self.diag_idx, : self.nq] += Px
        idx = self.dense_idx
        if idx.size:
            xb = self.blocks(x)
            Px = np.matmul(self.Pq, xb[None, :, :, None])[..., 0]  # (mq, nb, bs)
            vals[idx] += 0.5 * np.einsum("jbk,bk->j", Px, xb)
            if need_grad:
                grads[idx, : self.nq] += Px.reshape(idx.size, -1)
        return vals, grads

    def bound_slacks(self, x):
        return (x - self.lo)[self.has_lo], (self.hi - x)[self.has_hi]

    def strictly_feasible(self, x):
        vals, _ = self.constraints(x, need_grad=False)
        sl, su = self.bound_slacks(x)
        return bool(np.all(vals < 0) and np.all(sl > 0) and np.all(su > 0))

    def barrier_value(self, x, t):
        """t f0 + phi, or +inf outside the domain."""
        vals, _ = self.constraints(x, need_grad=False)
        sl, su = self.bound_slacks(x)
        if np.any(vals >= 0) or np.any(sl <= 0) or np.any(su <= 0):
            return math.inf
        f0, _ = self.objective(x)
        return t * f0 - float(np.sum(np.log(-vals))) - float(np.sum(np.log(sl))) \
            - float(np.sum(np.log(su)))

    def newton_system(self, x, t):
        f0, g0 = self.objective(x)
        vals, grads = self.constraints(x)
        s = -vals
        grad = t * g0 + grads.T @ (1.0 / s) if self.m else t * g0
        dl = np.zeros(self.n)
        dh = np.zeros(self.n)
        dl[self.has_lo] = 1.0 / (x - self.lo)[self.has_lo]
        dh[self.has_hi] = 1.0 / (self.hi - x)[self.has_hi]
        grad = grad - dl + dh
        diag = dl ** 2 + dh ** 2
        if self.nb:
            rep = self.rep
            if self.P0_is_diag:
                D = np.zeros((rep.size, self.bs, self.bs))
                diag[: self.nq] += t * self.P0d
            else:
                D = t * self.P0[rep]
            if self.dense_idx.size:
                D += np.tensordot(1.0 / s[self.dense_idx], self.Pq[:, rep], axes=(0, 0))
            if self.diag_idx.size:
                diag[: self.nq] += (1.0 / s[self.diag_idx]) @ self.Pd
            db = diag[: self.nq].reshape(self.nb, self.bs)
            D[:, np.arange(self.bs), np.arange(self.bs)] += db[rep]
        else:
            D = np.zeros((0, 0, 0))
        U = (grads / s[:, None]).T if self.m else np.zeros((self.n, 0))
        return grad, D, diag[self.nq:], U

    def solve_newton(self, D, dfree, U, rhs):
        """Solve (blockdiag(D[rep_of], diag(dfree)) + U U') v = rhs."""
        n, nq = self.n, self.nq
        Drep = D
        D = Drep[self.rep_of] if self.nb else Drep

        def matvec(v):
            out = np.empty(n)
            if self.nb:
                out[:nq] = np.einsum("bkl,bl->bk", D, v[:nq].reshape(self.nb, self.bs)).reshape(-1)
            out[nq:] = dfree * v[nq:]
            return out + U @ (U.T @ v)

        if n > 150 and np.all(dfree > 0):
            try:
                apply = self._woodbury(Drep, dfree, U)
                v = apply(rhs)
                # normwise backward error against a cheap bound on ||H||
                h_norm = float(np.sum(U * U)) + (float(np.max(np.abs(Drep).sum(axis=-1)))
                                                 if self.nb else 0.0)
                h_norm = max(h_norm, float(np.max(dfree, initial=0.0)))
                nrm = np.linalg.norm(rhs)
                for _ in range(4):
                    r = rhs - matvec(v)
                    err = np.linalg.norm(r)
                    if err <= 1e-14 * (h_norm * np.linalg.norm(v) + nrm):
                        break
                    v = v + apply(r)
                r = rhs - matvec(v)
                if np.linalg.norm(r) <= 1e-11 * (h_norm * np.linalg.norm(v) + nrm):
                    return v
                self.fallbacks += 1
            except np.linalg.LinAlgError:
                self.fallbacks += 1
        H = np.zeros((n, n))
        for b in range(self.nb):
            sl = slice(b * self.bs, (b + 1) * self.bs)
            H[sl, sl] = D[b]
        H[np.arange(nq, n), np.arange(nq, n)] = dfree
        H += U @ U.T
        H = 0.5 * (H + H.T)
        try:
            c = sla.cho_factor(H, check_finite=False)
            return sla.cho_solve(c, rhs, check_finite=False)
        except np.linalg.LinAlgError:
            ridge = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(H)))))
            try:
                c = sla.cho_factor(H + ridge * np.eye(n), check_finite=False)
                return sla.cho_solve(c, rhs, check_finite=False)
            except np.linalg.LinAlgError:
                return np.linalg.lstsq(H, rhs, rcond=None)[0]

    def _woodbury(self, D, dfree, U):
        """Factor once; return a function applying the inverse."""
        nq = self.nq
        k = U.shape[1]
        if self.nb:
            # a non-PD block shows up in the residual check of the caller
            Dinv = np.linalg.inv(D)
            Dinv = 0.5 * (Dinv + np.swapaxes(Dinv, -1, -2))[self.rep_of]

        def dinv(V):  # V: (n, p)
            out = np.empty_like(V)
            if self.nb:
                Vb = V[:nq].reshape(self.nb, self.bs, -1)
                out[:nq] = np.matmul(Dinv, Vb).reshape(nq, -1)
            out[nq:] = V[nq:] / dfree[:, None]
            return out

        if k == 0:
            return lambda r: dinv(r[:, None])[:, 0]
        DU = dinv(U)
        cap = np.eye(k) + U.T @ DU
        c = sla.cho_factor(0.5 * (cap + cap.T), check_finite=False)

        def apply(r):
            z = dinv(r[:, None])[:, 0]
            return z - DU @ sla.cho_solve(c, U.T @ z, check_finite=False)
        return apply


def _initial_t(ev: _Problem, x, settings: SolverSettings) -> float:
    """Barrier weight whose duality-gap estimate matches the objective scale.

    Erring small costs a few cheap centering steps; erring large makes the
    first centering a long damped-Newton phase.
    """
    if settings.t0 is not None:
        return settings.t0
    f0, g0 = ev.objective(x)
    scale = max(abs(f0), float(np.linalg.norm(g0)) * (1.0 + float(np.linalg.norm(x))), 1e-300)
    return max(ev.m + ev.n_bounds, 1) / scale


def _centering(ev: _Problem, x, t, settings, trace):
    steps = 0
    psi = ev.barrier_value(x, t)
    trace.append(psi)
    prev = math.inf
    for _ in range(settings.max_newton):
        grad, D, dfree, U = ev.newton_system(x, t)
        dx = ev.solve_newton(D, dfree, U, -grad)
        lam2 = -float(grad @ dx)
        steps += 1
        if lam2 / 2.0 <= settings.newton_tol or not np.isfinite(lam2):
            break
        if lam2 < 1e-3 and lam2 > 0.25 * prev:
            break  # quadratic convergence has stalled at the rounding floor
        prev = lam2
        if lam2 < 0:
            dx = -grad / max(np.linalg.norm(grad), 1e-300)
            lam2 = float(grad @ grad) / max(np.linalg.norm(grad), 1e-300)
        alpha = 1.0
        if lam2 < 0.0625:
            # quadratic convergence region of a self-concordant barrier:
            # the full step stays in the domain and Armijo is rounding-limited
            cand = x + dx
            val = ev.barrier_value(cand, t)
            if not np.isfinite(val):
                alpha = 0.5
        if alpha < 1.0 or lam2 >= 0.0625:
            while True:
                cand = x + alpha * dx
                val = ev.barrier_value(cand, t)
                if val <= psi - 0.25 * alpha * lam2:
                    break
                alpha *= 0.5
                if alpha < 1e-14:
                    break
            if alpha < 1e-14:
                break
        x, psi = cand, val
        trace.append(psi)
    return x, steps


def _barrier(ev: _Problem, x, settings: SolverSettings, stop=None) -> Solution:
    t = _initial_t(ev, x, settings)
    n_constr = ev.m + ev.n_bounds
    sol = Solution(x=None, objective=math.nan, status="iteration-limit")
    newton = 0
    for outer in range(settings.max_centering):
        trace: list[float] = []
        x, steps = _centering(ev, x, t, settings, trace)
        newton += steps
        sol.barrier_trace.append(trace)
        f0, _ = ev.objective(x)
        sol.objective_trace.append(f0)
        gap = n_constr / t
        if stop is not None and stop(x):
            sol.status = "optimal"
            break
        if gap <= settings.gap_abs + settings.gap_rel * abs(f0) or n_constr == 0:
            sol.status = "optimal"
            break
        t *= settings.mu
    vals, _ = ev.constraints(x, need_grad=False)
    sol.x = x
    sol.objective = ev.objective(x)[0]
    sol.gap = n_constr / t
    sol.centering_steps = outer + 1
    sol.newton_steps = newton
    sol.multipliers = 1.0 / (t * -vals) if ev.m else np.zeros(0)
    lm = np.zeros(ev.n)
    um = np.zeros(ev.n)
    lm[ev.has_lo] = 1.0 / (t * (x - ev.lo)[ev.has_lo])
    um[ev.has_hi] = 1.0 / (t * (ev.hi - x)[ev.has_hi])
    sol.lower_multipliers, sol.upper_multipliers = lm, um
    _polish_multipliers(ev, sol)
    return sol


def _polish_multipliers(ev: _Problem, sol: Solution) -> None:
    """Re-fit multipliers of near-active constraints by non-negative least squares.

    The barrier estimate 1/(t s) loses relative accuracy when the slack s is
    computed by cancellation near the boundary; the gradients do not.
    """
    x = sol.x
    _, g0 = ev.objective(x)
    _, grads = ev.constraints(x)
    cols, kinds = [], []
    lam = sol.multipliers
    big = max(float(np.max(lam, initial=0.0)), float(np.max(sol.lower_multipliers, initial=0.0)),
              float(np.max(sol.upper_multipliers, initial=0.0)))
    if big == 0.0:
        return
    cut = 1e-6 * big
    for j in np.flatnonzero(lam > cut):
        cols.append(grads[j])
        kinds.append(("c", j))
    for j in np.flatnonzero(sol.lower_multipliers > cut):
        e = np.zeros(ev.n)
        e[j] = -1.0
        cols.append(e)
        kinds.append(("l", j))
    for j in np.flatnonzero(sol.upper_multipliers > cut):
        e = np.zeros(ev.n)
        e[j] = 1.0
        cols.append(e)
        kinds.append(("u", j))
    if not cols or len(cols) > ev.n:
        return
    A = np.column_stack(cols)
    # residual contributed by the constraints left out of the fit
    rest = g0.copy()
    small_c = lam <= cut
    rest += grads[small_c].T @ lam[small_c] if ev.m else 0.0
    rest -= np.where(sol.lower_multipliers <= cut, sol.lower_multipliers, 0.0)
    rest += np.where(sol.upper_multipliers <= cut, sol.upper_multipliers, 0.0)
    old = np.linalg.norm(A @ np.array([_pick(sol, k) for k in kinds]) + rest)
    coef, res = nnls(A, -rest, maxiter=50 * len(cols))
    if res < old:
        for (kind, j), v in zip(kinds, coef):
            {"c": sol.multipliers, "l": sol.lower_multipliers, "u": sol.upper_multipliers}[kind][j] = v


def _pick(sol: Solution, key) -> float:
    kind, j = key
    return {"c": sol.multipliers, "l": sol.lower_multipliers, "u": sol.upper_multipliers}[kind][j]


def _interior_start(lo, hi, x):
    """Push x strictly inside the box."""
    x = np.array(x, dtype=float)
    both = np.isfinite(lo) & np.isfinite(hi)
    width = np.where(both, hi - lo, 1.0)
    margin = np.minimum(1e-3 * width, 1e-3 * np.maximum(1.0, np.abs(x)))
    x = np.where(np.isfinite(lo), np.maximum(x, lo + margin), x)
    x = np.where(np.isfinite(hi), np.minimum(x, hi - margin), x)
    return np.where(both, np.clip(x, lo + margin, hi - margin), x)


def _phase_one(prob: ConvexQcqp, x0, settings: SolverSettings):
    """Minimize s subject to f_j(x) <= s; stop as soon as s < 0."""
    x0 = _interior_start(prob.lower, prob.upper, x0)
    ev = _Problem(prob)
    vals, _ = ev.constraints(x0, need_grad=False)
    if ev.m == 0 or np.all(vals < 0):
        return x0
    scale = max(1.0, float(np.max(np.abs(vals))))
    s0 = float(np.max(vals)) + 0.1 * scale
    aux = ConvexQcqp(
        n_blocks=prob.n_blocks, block_size=prob.block_size, n_free=prob.n_free + 1,
        objective_linear=np.r_[np.zeros(prob.n), 1.0],
        constraint_linear=np.c_[prob.constraint_linear, -np.ones(prob.m)],
        rhs=prob.rhs,
        objective_blocks=np.zeros_like(prob.objective_blocks),
        constraint_blocks=prob.constraint_blocks,
        lower=np.r_[prob.lower, -(abs(s0) + scale)],
        upper=np.r_[prob.upper, s0 + scale],
    )
    aev = _Problem(aux)
    margin = 1e-9 * scale

    def feasible(z):
        return z[-1] < -margin and ev.strictly_feasible(z[:-1])

    sol = _barrier(aev, np.r_[x0, s0], settings, stop=feasible)
    z = sol.x
    if ev.strictly_feasible(z[:-1]):
        return z[:-1]
    return None


def solve_qcqp(prob: ConvexQcqp, settings: SolverSettings | None = None,
               x0: np.ndarray | None = None) -> Solution:
    """Minimize a convex QCQP from a strictly feasible start.

    A slack-minimizing phase I is run when ``x0`` is missing or not strictly
    feasible (unless ``settings.phase1`` is off, in which case ``ValueError``
    is raised).
    """
    settings = settings or SolverSettings()
    prob.validate_psd(settings.psd_ridge)
    ev = _Problem(prob)
    if x0 is None:
        x0 = np.zeros(prob.n)
    x0 = np.asarray(x0, dtype=float)
    if not ev.strictly_feasible(x0):
        if not settings.phase1:
            raise ValueError("initial point is not strictly feasible")
        x0 = _phase_one(prob, x0, settings)
        if x0 is None:
            return Solution(x=None, objective=math.nan, status="infeasible")
    if not np.any(ev.q0) and not np.any(ev.P0):
        # constant objective: the start is already optimal
        sol = Solution(x=x0, objective=prob.objective_constant, status="optimal", gap=0.0)
        sol.multipliers = np.zeros(ev.m)
        sol.lower_multipliers = np.zeros(ev.n)
        sol.upper_multipliers = np.zeros(ev.n)
        return sol
    return _barrier(ev, x0, settings)


def _lp_as_qcqp(lp: LinearProgram, keep: np.ndarray, fixed_vals: np.ndarray) -> ConvexQcqp:
    A = lp.A_ub[:, keep]
    b = lp.b_ub - lp.A_ub[:, ~keep] @ fixed_vals
    n = int(keep.sum())
    return ConvexQcqp(n_blocks=0, block_size=0, n_free=n, objective_linear=lp.c[keep],
                      constraint_linear=A, rhs=b, lower=lp.lower[keep], upper=lp.upper[keep],
                      objective_constant=float(lp.c[~keep] @ fixed_vals))


def solve_lp(lp: LinearProgram, settings: SolverSettings | None = None,
             x0: np.ndarray | None = None) -> Solution:
    """Minimize ``c'x`` over the polyhedron with the barrier core.

    Variables with ``lower == upper`` are substituted out.  Rows whose
    coefficients vanish are checked directly and dropped.
    """
    settings = settings or SolverSettings()
    n = lp.c.size
    fixed = lp.lower == lp.upper
    keep = ~fixed
    fixed_vals = lp.lower[fixed]
    A = lp.A_ub[:, keep]
    b = lp.b_ub - lp.A_ub[:, fixed] @ fixed_vals
    empty = ~np.any(A != 0.0, axis=1)
    if np.any(b[empty] < -settings.feas_tol):
        return Solution(x=None, objective=math.nan, status="infeasible")
    rows = ~empty
    reduced = LinearProgram(c=lp.c, A_ub=lp.A_ub[rows], b_ub=lp.b_ub[rows],
                            lower=lp.lower, upper=lp.upper)
    x = np.empty(n)
    x[fixed] = fixed_vals
    if not np.any(keep):
        sol = Solution(x=x, objective=float(lp.c @ x), status="optimal", gap=0.0)
        sol.multipliers = np.zeros(lp.b_ub.size)
        sol.lower_multipliers = np.zeros(n)
        sol.upper_multipliers = np.zeros(n)
        return sol
    prob = _lp_as_qcqp(reduced, keep, fixed_vals)
    start = None if x0 is None else np.asarray(x0, float)[keep]
    sub = solve_qcqp(prob, settings, start)
    if sub.x is None:
        return Solution(x=None, objective=math.nan, status=sub.status)
    x[keep] = sub.x
    mult = np.zeros(lp.b_ub.size)
    mult[rows] = sub.multipliers
    lm = np.zeros(n)
    um = np.zeros(n)
    lm[keep] = sub.lower_multipliers
    um[keep] = sub.upper_multipliers
    return Solution(x=x, objective=float(lp.c @ x), status=sub.status, multipliers=mult,
                    lower_multipliers=lm, upper_multipliers=um,
                    centering_steps=sub.centering_steps, newton_steps=sub.newton_steps,
                    gap=sub.gap, barrier_trace=sub.barrier_trace,
                    objective_trace=sub.objective_trace)


# ----------------------------------------------------------------------------
# KKT check
# ----------------------------------------------------------------------------

@dataclass
class KktReport:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def max_residual(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)

    def ok(self, tol: float) -> bool:
        return self.max_residual <= tol


def verify_kkt(prob: ConvexQcqp | LinearProgram, x, multipliers,
               lower_multipliers=None, upper_multipliers=None) -> KktReport:
    """Residuals of the four KKT conditions.

    Stationarity is scaled by ``1 + |grad f0| + sum_j lambda_j |grad f_j|``
    (infinity norms) so that it is comparable across problem scalings.
    """
    if isinstance(prob, LinearProgram):
        prob = ConvexQcqp(n_blocks=0, block_size=0, n_free=prob.c.size,
                          objective_linear=prob.c, constraint_linear=prob.A_ub, rhs=prob.b_ub,
                          lower=prob.lower, upper=prob.upper)
    ev = _Problem(prob)
    x = np.asarray(x, float)
    lam = np.asarray(multipliers, float)
    lm = np.zeros(ev.n) if lower_multipliers is None else np.asarray(lower_multipliers, float)
    um = np.zeros(ev.n) if upper_multipliers is None else np.asarray(upper_multipliers, float)
    _, g0 = ev.objective(x)
    vals, grads = ev.constraints(x)
    resid = g0 + (grads.T @ lam if ev.m else 0.0) - lm + um
    scale = 1.0 + np.max(np.abs(g0), initial=0.0)
    if ev.m:
        scale += float(np.sum(lam * np.max(np.abs(grads), axis=1)))
    scale += float(np.max(lm, initial=0.0) + np.max(um, initial=0.0))
    stationarity = float(np.max(np.abs(resid), initial=0.0)) / scale
    lo_gap = np.where(ev.has_lo, x - ev.lo, 0.0)
    hi_gap = np.where(ev.has_hi, ev.hi - x, 0.0)
    primal = max(0.0, float(np.max(vals, initial=0.0)), float(np.max(-lo_gap, initial=0.0)),
                 float(np.max(-hi_gap, initial=0.0)))
    dual = max(0.0, float(np.max(-lam, initial=0.0)), float(np.max(-lm, initial=0.0)),
               float(np.max(-um, initial=0.0)))
    comp = max(float(np.max(np.abs(lam * vals), initial=0.0)),
               float(np.max(np.abs(lm * lo_gap), initial=0.0)),
               float(np.max(np.abs(um * hi_gap), initial=0.0)))
    return KktReport(stationarity=stationarity, primal=primal, dual=dual, complementarity=comp)


def dump_problem(prob: ConvexQcqp, path: str | Path) -> None:
    """Write problem data as plain text for offline cross-checking.

    Layout: a header line ``n_blocks block_size n_free m``, then the
    objective linear term, one line per constraint ``rhs label`` followed by
    its linear term, then every non-zero quadratic block as
    ``# Q <constraint|obj> <block>`` plus ``block_size`` rows.
    """
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"{prob.n_blocks} {prob.block_size} {prob.n_free} {prob.m}\n")
        fh.write(" ".join(repr(float(v)) for v in prob.objective_linear) + "\n")
        for j in range(prob.m):
            fh.write(f"{float(prob.rhs[j])!r} {prob.labels[j]}\n")
            fh.write(" ".join(repr(float(v)) for v in prob.constraint_linear[j]) + "\n")
        for b in range(prob.n_blocks):
            if np.any(prob.objective_blocks[b]):
                fh.write(f"# Q obj {b}\n")
                np.savetxt(fh, prob.objective_blocks[b])
        for j in range(prob.m):
            for b in range(prob.n_blocks):
                if np.any(prob.constraint_blocks[j, b]):
                    fh.write(f"# Q {j} {b}\n")
                    np.savetxt(fh, prob.constraint_blocks[j, b])
