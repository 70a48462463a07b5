"""Configuration objects, errors and weight rules for rational fitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class FitDivergenceError(RuntimeError):
    """Pole relocation produced a non-finite or non-improving objective.

    ``history`` holds the objective values of all accepted iterates.
    """

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


class IllPosedFitError(ValueError):
    """Requested degree exceeds what the surrogate can determine."""


class EquilibrationError(RuntimeError):
    """Lawson reweighting did not equilibrate the error curve."""


class SearchCapError(RuntimeError):
    """Degree search exceeded its cap without meeting the tolerance."""


@dataclass(frozen=True, eq=False)
class Surrogate:
    """Diagonal spectral stand-in: sorted nonnegative eigenvalues, probe of ones."""

    eigenvalues: np.ndarray

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=float).ravel()
        if ev.size == 0 or not np.all(np.isfinite(ev)):
            raise ValueError("surrogate eigenvalues must be finite and nonempty")
        if ev[0] != 0.0:
            raise ValueError("surrogate must start at 0")
        if np.any(np.diff(ev) <= 0):
            raise ValueError("surrogate eigenvalues must be strictly increasing")
        object.__setattr__(self, "eigenvalues", ev)

    @classmethod
    def default(cls, n: int = 2000, lo: float = 1e-5, hi: float = 1e7) -> Surrogate:
        return cls(np.concatenate([[0.0], np.logspace(np.log10(lo), np.log10(hi), n - 1)]))

    @property
    def size(self) -> int:
        return self.eigenvalues.size

    def key(self) -> tuple:
        ev = self.eigenvalues
        return (ev.size, float(ev[1]) if ev.size > 1 else 0.0, float(ev[-1]),
                hash(ev.tobytes()))


@dataclass(frozen=True, eq=False)
class FitConfig:
    """Inputs of a shared-pole fit. ``times`` are physical; fitting is normalized."""

    degree: int
    times: np.ndarray
    weights: np.ndarray | None = None
    max_relocation_iters: int = 100
    stagnation_tol: float = 1e-10
    surrogate: Surrogate = field(default_factory=Surrogate.default)

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if np.any(times <= 0) or np.any(np.diff(times) <= 0):
            raise ValueError("times must be positive and strictly increasing")
        w = np.ones_like(times) if self.weights is None else np.atleast_1d(
            np.asarray(self.weights, dtype=float))
        if w.shape != times.shape or np.any(w <= 0):
            raise ValueError("weights must be positive, one per time")
        if int(self.degree) < 2:
            raise ValueError("degree must be at least 2")
        if int(self.max_relocation_iters) < 1:
            raise ValueError("max_relocation_iters must be at least 1")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "degree", int(self.degree))

    @property
    def tau(self) -> np.ndarray:
        return self.times / self.times[0]


def weight_preset(rule: str, times) -> np.ndarray:
    """Channel weights ``(t_j / t_min)**p`` for p in {0, 3/2, 5/2}."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times <= 0):
        raise ValueError("times must be positive")
    powers = {"unit": 0.0, "t32": 1.5, "t52": 2.5}
    if rule not in powers:
        raise ValueError(f"unknown weight rule {rule!r}; expected one of {sorted(powers)}")
    if powers[rule] == 0.0:
        return np.ones_like(times)
    return (times / times.min()) ** powers[rule]


def log_times(tmin: float, tmax: float, n: int) -> np.ndarray:
    """``n`` log-spaced channels on ``[tmin, tmax]`` (a single channel if equal)."""
    if tmin <= 0 or tmax < tmin:
        raise ValueError("need 0 < tmin <= tmax")
    if tmax == tmin:
        return np.array([float(tmin)])
    if n < 2:
        raise ValueError("need at least two channels for tmax > tmin")
    return np.logspace(np.log10(tmin), np.log10(tmax), n)
