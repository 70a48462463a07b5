"""Gauss-Newton recovery of log-conductivities through a shared-pole forward map.

With ``A_i(m) = K - xi_i M(m)`` and ``M(m) = sum_k exp(m_k) M_k``, the
observed transient at time ``t_j`` is

    v_j(m) = sum_i c_i Re(alpha_ij Q A_i(m)^{-1} f),

``c_i = 2`` for one member of a conjugate pair and 1 for a real pole. Since
``d A_i^{-1} / d m_k = xi_i A_i^{-1} exp(m_k) M_k A_i^{-1}``, the Jacobian
reuses the same factorizations. Outputs are flattened in (time, source,
observation) order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular

from .expmact import FactorizationCache, SolveLedger
from .models import ParamModel
from .ratcore import RationalFamily


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, message, rank):
        super().__init__(message)
        self.rank = rank


class CGLSConvergenceError(RuntimeError):
    pass


@dataclass(eq=False)
class ForwardMap:
    family: RationalFamily
    param_model: ParamModel
    K: np.ndarray
    Q: np.ndarray
    sources: np.ndarray
    bandwidth: int | None = None
    cache: FactorizationCache = field(default_factory=FactorizationCache)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        F = np.asarray(self.sources, dtype=float)
        self.sources = F[:, None] if F.ndim == 1 else F
        n = self.K.shape[0]
        if self.Q.shape[1] != n or self.sources.shape[0] != n:
            raise ValueError("K, Q and sources have inconsistent sizes")
        if self.param_model.components[0].shape != (n, n):
            raise ValueError("mass components do not match K")
        self.shifts = self.family.shifts()
        self.half = self.family.half_residues()
        self.weight = np.where(self.family.pole_set.representative_is_real, 1.0, 2.0)

    @property
    def n_params(self) -> int:
        return self.param_model.n_params

    @property
    def n_data(self) -> int:
        return self.family.n_channels * self.sources.shape[1] * self.Q.shape[0]

    def factorization(self, i, m, ledger):
        M = self.param_model.mass(m)
        return self.cache.get(self.K, M, self.shifts[i], 1.0, self.bandwidth, ledger,
                              token=("mass", np.asarray(m, float).tobytes()))

    def _assemble(self, per_pole):
        """``sum_i c_i Re(alpha_ij * X_i)`` for X_i of shape (M_obs, S) -> flat vector."""
        X = np.stack(per_pole)  # (n_rep, M_obs, S)
        V = np.einsum("i,ij,ios->jso", self.weight, self.half, X).real
        return V.ravel()


def forward(fm: ForwardMap, m, ledger: SolveLedger | None = None) -> np.ndarray:
    """Observed transients for all channels, sources and observation rows."""
    m = np.asarray(m, dtype=float)
    out = []
    for i in range(fm.shifts.size):
        G = fm.factorization(i, m, ledger).solve(fm.sources)
        out.append(fm.Q @ G)
    return fm._assemble(out)


@dataclass
class JacobianBlock:
    """Stacked Jacobian; rows follow the (time, source, observation) order."""

    J: np.ndarray
    n_times: int
    n_sources: int
    n_obs: int

    def time_block(self, j: int) -> np.ndarray:
        rows = self.n_sources * self.n_obs
        return self.J[j * rows:(j + 1) * rows]

    def matvec(self, x):
        return self.J @ x

    def rmatvec(self, y):
        return self.J.T @ y


def _mass_terms(fm, m, G):
    """``[exp(m_k) M_k G]_k`` stacked as (P, N, S)."""
    return np.stack([np.exp(mk) * (Mk @ G) for mk, Mk in zip(m, fm.param_model.components)])


def jacobian(fm: ForwardMap, m, ledger: SolveLedger | None = None) -> JacobianBlock:
    """Closed-form Jacobian with one factorization and two solves per pole."""
    m = np.asarray(m, dtype=float)
    P, S, N = fm.n_params, fm.sources.shape[1], fm.K.shape[0]
    per_pole = []
    for i in range(fm.shifts.size):
        fac = fm.factorization(i, m, ledger)
        G = fac.solve(fm.sources)
        D = _mass_terms(fm, m, G)  # (P, N, S)
        H = fac.solve(D.transpose(1, 0, 2).reshape(N, P * S)).reshape(N, P, S)
        per_pole.append(fm.shifts[i] * np.einsum("on,nps->ops", fm.Q, H))
    X = np.stack(per_pole)  # (n_rep, M_obs, P, S)
    J = np.einsum("i,ij,iops->jsop", fm.weight, fm.half, X).real
    Kc, Mo = fm.family.n_channels, fm.Q.shape[0]
    return JacobianBlock(J.reshape(Kc * S * Mo, P), Kc, S, Mo)


def jtv_actions(fm: ForwardMap, m, x=None, y=None, ledger: SolveLedger | None = None):
    """Matrix-free ``J x`` (if ``x`` given) or ``J^T y`` (if ``y`` given).

    Each action makes two solves per representative pole; the factorizations
    come from the forward map's cache.
    """
    if (x is None) == (y is None):
        raise ValueError("pass exactly one of x and y")
    m = np.asarray(m, dtype=float)
    P, S, Mo, Kc = fm.n_params, fm.sources.shape[1], fm.Q.shape[0], fm.family.n_channels
    if x is not None:
        x = np.asarray(x, dtype=float)
        if x.shape != (P,):
            raise ValueError(f"x must have length {P}")
        out = []
        for i in range(fm.shifts.size):
            fac = fm.factorization(i, m, ledger)
            G = fac.solve(fm.sources)
            W = np.einsum("p,pns->ns", x, _mass_terms(fm, m, G))
            out.append(fm.shifts[i] * (fm.Q @ fac.solve(W)))
        return fm._assemble(out)
    y = np.asarray(y, dtype=float)
    if y.shape != (Kc * S * Mo,):
        raise ValueError(f"y must have length {Kc * S * Mo}")
    Y = y.reshape(Kc, S, Mo)
    g = np.zeros(P)
    for i in range(fm.shifts.size):
        fac = fm.factorization(i, m, ledger)
        G = fac.solve(fm.sources)
        # sum_j alpha_ij y_j mapped back through Q, scaled by xi_i
        Z = fm.shifts[i] * (fm.Q.T @ np.einsum("j,jso->os", fm.half[i], Y))
        Pz = fac.solve(Z, trans=True)
        D = _mass_terms(fm, m, G)
        g += fm.weight[i] * np.einsum("ns,pns->p", Pz, D).real
    return g


def cgls(matvec, rmatvec, b, n, damp: float = 0.0, tol: float = 1e-12, maxit: int = 200,
         raise_on_cap: bool = True):
    """Conjugate gradients on the normal equations of ``min |A x - b|^2 + damp^2 |x|^2``.

    ``b`` may already include damped rows; ``damp`` adds ``damp * I`` rows
    with zero right-hand side.
    """
    x = np.zeros(n)
    r = np.asarray(b, dtype=float).copy()
    s = rmatvec(r)
    p = s.copy()
    gamma = s @ s
    gamma0 = gamma
    if gamma0 == 0.0:
        return x, 0
    for it in range(1, maxit + 1):
        q = matvec(p)
        delta = q @ q + damp**2 * (p @ p)
        if delta <= 0:
            break
        a = gamma / delta
        x += a * p
        r -= a * q
        s = rmatvec(r) - damp**2 * x
        gamma_new = s @ s
        if np.sqrt(gamma_new) <= tol * np.sqrt(gamma0):
            return x, it
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
    if raise_on_cap:
        raise CGLSConvergenceError(f"CGLS did not converge in {maxit} iterations")
    return x, maxit


@dataclass
class GaussNewtonState:
    m: np.ndarray
    alpha: float
    lam: float
    m_ref: np.ndarray
    residual_history: list = field(default_factory=list)
    objective_history: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    @property
    def iterations(self) -> int:
        return len(self.iterates) - 1


def _objective(r, m, lam, m_ref):
    return float(r @ r + lam * np.sum((m - m_ref) ** 2))


def gauss_newton(fm: ForwardMap, data, m0, alpha: float = 1.0, lam: float = 0.0,
                 m_ref=None, max_iters: int = 50, mode: str = "qr", tol: float = 1e-8,
                 step_tol: float = 1e-10, max_halvings: int = 10,
                 cgls_tol: float = 1e-14, cgls_maxit: int = 200,
                 ledger: SolveLedger | None = None) -> GaussNewtonState:
    """Gauss-Newton with Armijo-style halving on the (regularized) misfit.

    ``mode='qr'`` solves each step by economic QR of the stacked Jacobian;
    ``mode='cgls'`` uses only ``J x`` and ``J^T y`` actions.
    """
    if mode not in ("qr", "cgls"):
        raise ValueError("mode must be 'qr' or 'cgls'")
    data = np.asarray(data, dtype=float)
    if data.shape != (fm.n_data,):
        raise ValueError(f"data length {data.size} != forward output length {fm.n_data}")
    m = np.asarray(m0, dtype=float).copy()
    m_ref = m.copy() if m_ref is None else np.asarray(m_ref, dtype=float)
    P = m.size
    sl = np.sqrt(lam)
    dnorm = max(np.linalg.norm(data), np.finfo(float).tiny)
    state = GaussNewtonState(m.copy(), alpha, lam, m_ref)
    r = forward(fm, m, ledger) - data
    phi = _objective(r, m, lam, m_ref)
    state.residual_history.append(float(np.linalg.norm(r)))
    state.objective_history.append(phi)
    state.iterates.append(m.copy())
    for _ in range(max_iters):
        if np.linalg.norm(r) / dnorm < tol:
            state.converged, state.reason = True, "residual"
            break
        rhs = np.concatenate([r, sl * (m - m_ref)]) if lam > 0 else r
        if mode == "qr":
            J = jacobian(fm, m, ledger).J
            A = np.vstack([J, sl * np.eye(P)]) if lam > 0 else J
            Qm, R = qr(A, mode="economic")
            d = np.abs(np.diag(R))
            rank = int(np.sum(d > 1e-12 * d.max()))
            if rank < P:
                raise RankDeficientError(f"Jacobian rank {rank} < {P}", rank)
            step = solve_triangular(R, Qm.T @ rhs)
        else:
            def mv(x):
                jx = jtv_actions(fm, m, x=x, ledger=ledger)
                return np.concatenate([jx, sl * x]) if lam > 0 else jx

            def rmv(yv):
                g = jtv_actions(fm, m, y=yv[:fm.n_data], ledger=ledger)
                return g + sl * yv[fm.n_data:] if lam > 0 else g

            step, _ = cgls(mv, rmv, rhs, P, tol=cgls_tol, maxit=cgls_maxit)
        a = alpha
        for _ in range(max_halvings + 1):
            m_new = m - a * step
            r_new = forward(fm, m_new, ledger) - data
            phi_new = _objective(r_new, m_new, lam, m_ref)
            if phi_new < phi:
                break
            a *= 0.5
        else:
            state.reason = "line search failed"
            break
        fm.cache.clear()
        m, r, phi = m_new, r_new, phi_new
        state.m, state.alpha = m.copy(), a
        state.residual_history.append(float(np.linalg.norm(r)))
        state.objective_history.append(phi)
        state.iterates.append(m.copy())
        state.step_sizes.append(a)
        if np.linalg.norm(a * step) < step_tol:
            state.converged, state.reason = True, "step"
            break
    else:
        state.reason = state.reason or "max_iters"
    if state.converged is False and np.linalg.norm(r) / dnorm < tol:
        state.converged, state.reason = True, "residual"
    return state
