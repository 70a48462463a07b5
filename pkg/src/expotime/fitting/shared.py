"""Shared-pole families by degree continuation on a spectral surrogate.

The degree is raised two at a time. Each step seeds one new conjugate pair
at a few candidate locations (beyond the outermost pole, inside the
innermost, in the widest log-modulus gap), runs the projected
Levenberg-Marquardt solve from each, and keeps the best. Odd degrees add a
single negative real pole to the preceding even solution.
"""

from __future__ import annotations

import threading

import numpy as np

from ..ratcore import RationalFamily, uniform_error
from .types import FitConfig, FitDivergenceError, IllPosedFitError, Surrogate
from .varpro import (Problem, coefficients_to_residues, join_poles,
                     levenberg_marquardt, real_basis, solve_residues, split_poles)

PAIR_ANGLE = 0.75 * np.pi
# residue penalty relative to (surrogate size * total weight)
DEFAULT_RIDGE = 1e-24


def _pair_candidates(poles) -> list[complex]:
    real, up = split_poles(poles)
    allp = np.concatenate([up, real + 0j])
    mods = np.abs(allp)
    order = np.argsort(mods)
    big, small = allp[order[-1]], allp[order[0]]

    def angle(z):
        return np.angle(z) if z.imag > 0 else PAIR_ANGLE

    out = [2.0 * abs(big) * np.exp(1j * angle(big)),
           0.5 * abs(small) * np.exp(1j * angle(small))]
    logm = np.log(mods[order])
    if logm.size > 1:
        i = int(np.argmax(np.diff(logm)))
        out.append(np.exp(0.5 * (logm[i] + logm[i + 1]) + 1j * PAIR_ANGLE))
    return out


def _real_candidates(poles) -> list[float]:
    mods = np.sort(np.abs(poles))
    out = [-2.0 * mods[-1], -0.5 * mods[0]]
    logm = np.log(mods)
    if logm.size > 1:
        i = int(np.argmax(np.diff(logm)))
        out.append(-np.exp(0.5 * (logm[i] + logm[i + 1])))
    return out


class SharedPoleFitter:
    """Degree continuation for one (channels, weights, surrogate) setting.

    Fits for every degree reached are cached, so sweeps over increasing
    degree (and repeated table cells) reuse earlier work.
    """

    def __init__(self, tau, weights=None, surrogate: Surrogate | None = None,
                 maxit: int = 100, tol: float = 1e-10, ridge: float = DEFAULT_RIDGE):
        self.tau = np.atleast_1d(np.asarray(tau, dtype=float))
        self.weights = (np.ones_like(self.tau) if weights is None
                        else np.atleast_1d(np.asarray(weights, dtype=float)))
        self.surrogate = surrogate or Surrogate.default()
        self.maxit = maxit
        self.tol = tol
        y = self.surrogate.eigenvalues
        self.ridge = ridge * y.size * float(self.weights.sum())
        self.problem = Problem(y, np.exp(-np.outer(y, self.tau)), self.weights, self.ridge)
        self._poles: dict[int, np.ndarray] = {}
        self._history: dict[int, list] = {}
        self._lock = threading.Lock()

    def _lm(self, p0, maxit, tol):
        try:
            return levenberg_marquardt(self.problem, p0, maxit=maxit, tol=tol)
        except (FitDivergenceError, ValueError, np.linalg.LinAlgError):
            return None

    def _start(self):
        ratio = self.tau[-1] / self.tau[0]
        best = None
        for s in np.logspace(-np.log10(ratio), 0.5, 5):
            z = s * np.exp(1j * PAIR_ANGLE)
            res = self._lm(np.array([z, np.conj(z)]), self.maxit, self.tol)
            if res is not None and (best is None or res.cost < best.cost):
                best = res
        return best

    def _extend(self, poles, candidates, pair: bool):
        best = None
        for c in candidates:
            new = [c, np.conj(c)] if pair else [complex(c)]
            res = self._lm(np.concatenate([poles, new]), 40, 1e-7)
            if res is not None and (best is None or res.cost < best.cost):
                best = res
        if best is None:
            raise FitDivergenceError("all continuation candidates failed",
                                     self._history.get(poles.size, []))
        final = self._lm(best.poles, self.maxit, self.tol) or best
        if final.cost > best.cost:
            final = best
        final.history = best.history + final.history[1:]
        return final

    def poles(self, degree: int) -> np.ndarray:
        if degree < 2:
            raise ValueError("degree must be at least 2")
        if degree > self.surrogate.size:
            raise IllPosedFitError(
                f"degree {degree} exceeds the {self.surrogate.size} surrogate samples")
        with self._lock:
            return self._poles_locked(degree)

    def _poles_locked(self, degree):
        if degree in self._poles:
            return self._poles[degree]
        if degree == 2:
            res = self._start()
            if res is None:
                raise FitDivergenceError("no starting pair converged")
        elif degree % 2 == 0:
            prev = self._poles_locked(degree - 2)
            res = self._extend(prev, _pair_candidates(prev), pair=True)
        else:
            prev = self._poles_locked(degree - 1)
            res = self._extend(prev, _real_candidates(prev), pair=False)
        self._poles[degree] = res.poles
        self._history[degree] = res.history
        return res.poles

    def history(self, degree: int) -> list:
        self.poles(degree)
        return list(self._history[degree])

    def objective(self, poles) -> float:
        real, up = split_poles(poles)
        C = solve_residues(self.problem.y, self.problem.F, real, up, ridge=self.ridge)
        R = (real_basis(self.problem.y, real, up) @ C - self.problem.F) * self.problem.sw
        return float(np.sum(R**2))

    def family(self, degree: int, times=None, meta=None) -> RationalFamily:
        """Family of the given degree; ``times`` sets the physical scale."""
        poles = self.poles(degree)
        real, up = split_poles(poles)
        C = solve_residues(self.problem.y, self.problem.F, real, up, ridge=self.ridge)
        res = coefficients_to_residues(C, real.size, up.size)
        all_poles = join_poles(real, up)
        t = self.tau if times is None else np.asarray(times, dtype=float)
        info = {"degree": degree, "ratio": float(self.tau[-1] / self.tau[0]),
                "objective": self.objective(poles),
                "ridge": self.ridge,
                "objective_history": self._history[degree],
                "surrogate_size": self.surrogate.size}
        info.update(meta or {})
        return RationalFamily.from_poles(all_poles, res, t, self.weights,
                                         t_scale=float(t[0]), meta=info)

    def uniform_error(self, degree: int) -> float:
        """Unweighted uniform error on the default grid."""
        fam = self.family(degree)
        return float(uniform_error(fam).per_time_error.max())


_FITTERS: dict[tuple, SharedPoleFitter] = {}
_FITTERS_LOCK = threading.Lock()


def get_fitter(tau, weights=None, surrogate: Surrogate | None = None,
               maxit: int = 100, tol: float = 1e-10,
               ridge: float = DEFAULT_RIDGE) -> SharedPoleFitter:
    """Process-wide fitter cache keyed by the fitting setup."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    w = np.ones_like(tau) if weights is None else np.asarray(weights, dtype=float)
    surrogate = surrogate or Surrogate.default()
    # channels equal up to rounding share one fitter
    key = (np.round(np.log10(tau), 12).tobytes(), np.round(np.log10(w), 12).tobytes(),
           surrogate.key(), maxit, tol, ridge)
    with _FITTERS_LOCK:
        if key not in _FITTERS:
            _FITTERS[key] = SharedPoleFitter(tau, w, surrogate, maxit, tol, ridge)
        return _FITTERS[key]


def fit_shared_poles(config: FitConfig) -> RationalFamily:
    """Fit a subdiagonal shared-pole family for the configured channels."""
    fitter = get_fitter(config.tau, config.weights, config.surrogate,
                        config.max_relocation_iters, config.stagnation_tol)
    return fitter.family(config.degree, times=config.times)
