"""Variable-projection least squares for shared poles.

The residues enter linearly, so they are projected out and only the pole
parameters are optimized (Levenberg-Marquardt on the reduced functional).
Poles are parametrized to stay off the nonnegative real axis:

* real pole ``-exp(u)``
* pair ``exp(rho + i*pi*phi(s))`` with ``phi`` a sigmoid squeezed into
  ``(DELTA, 1 - DELTA)``, plus its conjugate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular

from .types import FitDivergenceError

DELTA = 1e-6
S_CLIP = 30.0


def split_poles(p) -> tuple[np.ndarray, np.ndarray]:
    """Real poles ascending and upper-half-plane pair members by modulus."""
    p = np.asarray(p, dtype=complex)
    is_real = np.abs(p.imag) <= 1e-12 * np.abs(p)
    real = np.sort(p[is_real].real)
    up = p[~is_real & (p.imag > 0)]
    return real, up[np.argsort(np.abs(up), kind="stable")]


def join_poles(real, up) -> np.ndarray:
    return np.concatenate([np.asarray(real, float) + 0j, up, np.conj(up)])


def real_basis(y, real, up) -> np.ndarray:
    """Columns ``1/(y-r)`` for real poles then ``2Re g, -2Im g`` per pair."""
    g = 1.0 / (y[:, None] - up[None, :])
    B = np.empty((y.size, real.size + 2 * up.size))
    B[:, : real.size] = 1.0 / (y[:, None] - real[None, :])
    B[:, real.size::2] = 2.0 * g.real
    B[:, real.size + 1::2] = -2.0 * g.imag
    return B


def _phi(s):
    sig = 1.0 / (1.0 + np.exp(-s))
    return DELTA + (1.0 - 2.0 * DELTA) * sig, (1.0 - 2.0 * DELTA) * sig * (1.0 - sig)


def pack(real, up) -> np.ndarray:
    if np.any(real >= 0):
        raise ValueError("real poles must be negative")
    frac = np.clip(np.angle(up) / np.pi, DELTA * 1.5, 1 - DELTA * 1.5)
    sig = (frac - DELTA) / (1.0 - 2.0 * DELTA)
    return np.concatenate([np.log(-real), np.log(np.abs(up)), np.log(sig / (1 - sig))])


def unpack(theta, nr, nu):
    s = np.clip(theta[nr + nu:], -S_CLIP, S_CLIP)
    ph, dph = _phi(s)
    real = -np.exp(theta[:nr])
    up = np.exp(theta[nr:nr + nu] + 1j * np.pi * ph)
    return real, up, dph


def pole_scale(real, up) -> np.ndarray:
    """Per-column ``1/|pole|``; penalizing ``coef/|pole|`` bounds cancellation."""
    return np.concatenate([1.0 / np.abs(real), np.repeat(1.0 / np.abs(up), 2)])


def augmented_basis(y, real, up, ridge):
    B = real_basis(y, real, up)
    if ridge > 0:
        B = np.vstack([B, np.sqrt(ridge) * np.diag(pole_scale(real, up))])
    return B


def solve_residues(y, F, real, up, refine: int = 2, ridge: float = 0.0) -> np.ndarray:
    """Least-squares coefficients for ``real_basis`` with column equilibration.

    A positive ``ridge`` adds ``ridge * sum_k (c_k/|pole_k|)**2`` to the objective.
    """
    B = augmented_basis(y, real, up, ridge)
    if ridge > 0:
        F = np.vstack([F, np.zeros((B.shape[1], F.shape[1]))])
    cs = np.linalg.norm(B, axis=0)
    cs[cs == 0] = 1.0
    Bs = B / cs
    C = np.linalg.lstsq(Bs, F, rcond=None)[0]
    for _ in range(refine):
        C += np.linalg.lstsq(Bs, F - Bs @ C, rcond=None)[0]
    return C / cs[:, None]


def coefficients_to_residues(C, nr, nu) -> np.ndarray:
    """Map real-basis coefficients to complex residues in ``join_poles`` order."""
    C = np.asarray(C, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    a = C[nr::2] + 1j * C[nr + 1::2]
    return np.vstack([C[:nr] + 0j, a, np.conj(a)])


@dataclass
class Problem:
    """Surrogate samples ``y``, targets ``F`` (N x K) and channel weights."""

    y: np.ndarray
    F: np.ndarray
    weights: np.ndarray
    ridge: float = 0.0
    sw: np.ndarray = field(init=False)

    def __post_init__(self):
        self.sw = np.sqrt(self.weights)[None, :]

    def residual(self, theta, nr, nu, jacobian=True):
        """Projected residual and its Golub-Pereyra Jacobian."""
        y, sw, ridge = self.y, self.sw, self.ridge
        real, up, dph = unpack(theta, nr, nu)
        B = augmented_basis(y, real, up, ridge)
        F = self.F
        if ridge > 0:
            F = np.vstack([F, np.zeros((B.shape[1], F.shape[1]))])
        Q, R = qr(B, mode="economic", check_finite=True)
        Cq = Q.T @ F
        Rf = F - Q @ Cq
        r = (Rf * sw).ravel(order="F")
        if not jacobian:
            return r, None
        n, K = B.shape[1], F.shape[1]
        A = solve_triangular(R, Cq)
        P = theta.size
        # each parameter moves one real column or one pair of columns
        g = 1.0 / (y[:, None] - up[None, :])
        ny = y.size
        dcols = np.zeros((P, 2, B.shape[0]))
        cols = np.zeros((P, 2), dtype=int)
        for k in range(nr):
            dcols[k, 0, :ny] = real[k] / (y - real[k]) ** 2
            cols[k] = (k, k)
        gg = g**2 * up[None, :]
        for k in range(nu):
            c = nr + 2 * k
            for pidx, d in ((nr + k, gg[:, k]), (nr + nu + k, gg[:, k] * 1j * np.pi * dph[k])):
                dcols[pidx, 0, :ny] = 2.0 * d.real
                dcols[pidx, 1, :ny] = -2.0 * d.imag
                cols[pidx] = (c, c + 1)
        if ridge > 0:
            # penalty rows sqrt(ridge)/|pole| shrink as the log-modulus grows
            sc = np.sqrt(ridge) * pole_scale(real, up)
            for k in range(nr):
                dcols[k, 0, ny + k] = -sc[k]
            for k in range(nu):
                c = nr + 2 * k
                dcols[nr + k, 0, ny + c] = -sc[c]
                dcols[nr + k, 1, ny + c + 1] = -sc[c + 1]
        two = np.ones(P, dtype=bool)
        two[:nr] = False
        D = dcols[:, 0, :, None] * A[cols[:, 0]][:, None, :]
        D[two] += dcols[two, 1, :, None] * A[cols[two, 1]][:, None, :]
        QtD = np.einsum("in,pnk->pik", Q.T, D, optimize=True)
        Z = np.zeros((P, n, K))
        Z[np.arange(P), cols[:, 0]] = dcols[:, 0] @ Rf
        Z[two, cols[two, 1]] = dcols[two, 1] @ Rf
        W = solve_triangular(R, Z.transpose(1, 0, 2).reshape(n, P * K), trans="T")
        W = W.reshape(n, P, K).transpose(1, 0, 2) - QtD
        D += np.einsum("ni,pik->pnk", Q, W, optimize=True)
        J = -(D * sw[None]).transpose(0, 2, 1).reshape(P, -1).T
        return r, J


@dataclass
class LMResult:
    poles: np.ndarray
    cost: float
    history: list
    iterations: int


def levenberg_marquardt(problem: Problem, poles0, maxit=100, tol=1e-10) -> LMResult:
    """Minimize the projected objective from the starting poles ``poles0``.

    The returned cost never exceeds the initial cost.
    """
    real, up = split_poles(poles0)
    real = np.where(real < 0, real, -np.abs(real) - 1e-3)
    nr, nu = real.size, up.size
    theta = pack(real, up)
    try:
        with np.errstate(all="ignore"):
            r, J = problem.residual(theta, nr, nu)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise FitDivergenceError(f"objective undefined at the initial poles: {exc}", []) from exc
    cost = float(r @ r)
    if not np.isfinite(cost) or not np.all(np.isfinite(J)):
        raise FitDivergenceError("non-finite objective at the initial poles", [cost])
    history = [cost]
    mu = 1e-3
    it = 0
    for it in range(1, maxit + 1):
        if cost == 0.0:
            break
        grad = J.T @ r
        JTJ = J.T @ J
        dg = np.maximum(np.diag(JTJ), 1e-30)
        accepted = False
        for _ in range(20):
            try:
                step = np.linalg.solve(JTJ + mu * np.diag(dg), -grad)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            trial = theta + step
            try:
                with np.errstate(all="ignore"):
                    rt, _ = problem.residual(trial, nr, nu, jacobian=False)
            except (ValueError, np.linalg.LinAlgError):
                rt = None
            if rt is not None and np.all(np.isfinite(rt)) and rt @ rt < cost:
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            break
        new_cost = float(rt @ rt)
        rel = (cost - new_cost) / cost
        theta = trial
        try:
            with np.errstate(all="ignore"):
                r, J = problem.residual(theta, nr, nu)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise FitDivergenceError(f"relocation failed: {exc}", history) from exc
        if not np.all(np.isfinite(J)):
            raise FitDivergenceError("non-finite Jacobian during relocation", history)
        cost = new_cost
        history.append(cost)
        mu = max(mu / 3.0, 1e-12)
        if rel < tol:
            break
    real, up, _ = unpack(theta, nr, nu)
    return LMResult(join_poles(real, up), cost, history, it)
