"""Shared-pole rational families in partial-fraction form.

A family holds one rational function per time channel,

    r_j(x) = alpha0_j + sum_i alpha_ij / (t_scale * x - xi_i),

where the poles ``xi_i`` are common to all channels and live in the
normalized variable ``y = t_scale * x`` (``t_scale`` is the smallest time).
Each ``r_j`` approximates ``exp(-t_j x)`` on ``x >= 0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

REAL_TOL = 1e-12
SEPARATION_TOL = 1e-12


class PoleSetError(ValueError):
    """Pole set violates conjugate closure, distinctness or placement."""


class PoleHitError(ZeroDivisionError):
    """Evaluation point coincides with a real pole."""


@dataclass(frozen=True)
class PoleSet:
    """Poles closed under conjugation and kept off ``[0, inf)``.

    Canonical order: real poles ascending, then conjugate pairs by
    increasing modulus, each pair stored as ``(p, conj(p))`` with
    ``Im p > 0``.
    """

    poles: np.ndarray
    kinds: tuple[str, ...]

    @classmethod
    def from_poles(cls, poles: Sequence[complex]) -> PoleSet:
        p = np.asarray(poles, dtype=complex).ravel()
        if p.size == 0:
            raise PoleSetError("empty pole set")
        if not np.all(np.isfinite(p)):
            raise PoleSetError("non-finite pole")
        scale = np.maximum(np.abs(p), np.finfo(float).tiny)
        is_real = np.abs(p.imag) <= REAL_TOL * scale
        reals = np.sort(p[is_real].real)
        upper = p[~is_real & (p.imag > 0)]
        lower = p[~is_real & (p.imag < 0)]
        if upper.size != lower.size:
            raise PoleSetError("poles are not closed under conjugation")
        lower_left = list(lower)
        for q in upper:
            k = int(np.argmin(np.abs(np.asarray(lower_left) - np.conj(q))))
            if abs(lower_left[k] - np.conj(q)) > 1e-10 * abs(q):
                raise PoleSetError(f"pole {q} has no conjugate partner")
            lower_left.pop(k)
        upper = upper[np.argsort(np.abs(upper), kind="stable")]
        ordered = [complex(r, 0.0) for r in reals]
        kinds = ["real"] * reals.size
        for q in upper:
            ordered += [complex(q), complex(np.conj(q))]
            kinds += ["pair", "pair"]
        out = cls(np.array(ordered, dtype=complex), tuple(kinds))
        out.validate()
        return out

    def validate(self) -> None:
        p = self.poles
        kinds = np.array(self.kinds)
        real = p[kinds == "real"].real
        if np.any(real >= 0):
            raise PoleSetError("real pole on the nonnegative real axis")
        if p.size > 1:
            d = np.abs(p[:, None] - p[None, :])
            s = np.maximum(np.abs(p[:, None]), np.abs(p[None, :]))
            np.fill_diagonal(d, np.inf)
            if np.any(d <= SEPARATION_TOL * s):
                raise PoleSetError("repeated pole")

    @property
    def degree(self) -> int:
        return self.poles.size

    @property
    def representative_index(self) -> np.ndarray:
        """Indices of real poles and of the Im > 0 member of each pair."""
        kinds = np.array(self.kinds)
        idx = np.flatnonzero(kinds == "real").tolist()
        idx += np.flatnonzero((kinds == "pair") & (self.poles.imag > 0)).tolist()
        return np.array(idx, dtype=int)

    @property
    def representatives(self) -> np.ndarray:
        return self.poles[self.representative_index]

    @property
    def representative_is_real(self) -> np.ndarray:
        kinds = np.array(self.kinds)
        return kinds[self.representative_index] == "real"

    @property
    def n_real(self) -> int:
        return self.kinds.count("real")


@dataclass(frozen=True)
class ErrorReport:
    per_time_error: np.ndarray
    uniform_error: float
    sample_grid: np.ndarray
    weights: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_time_error": self.per_time_error.tolist(),
            "uniform_error": float(self.uniform_error),
            "grid_size": int(self.sample_grid.size),
        }


@dataclass(frozen=True, eq=False)
class RationalFamily:
    """Poles, per-channel residues and channel metadata.

    ``residues`` has shape ``(n_poles, K)`` in the canonical pole order of
    ``pole_set``. Conjugate symmetry of residue rows is enforced on
    construction so scalar values at real ``x`` are real.
    """

    pole_set: PoleSet
    times: np.ndarray
    weights: np.ndarray
    residues: np.ndarray
    t_scale: float
    absolute_term: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        res = np.asarray(self.residues, dtype=complex)
        if res.ndim == 1:
            res = res[:, None]
        if times.ndim != 1 or np.any(times <= 0) or np.any(np.diff(times) <= 0):
            raise ValueError("times must be positive and strictly increasing")
        if weights.shape != times.shape or np.any(weights <= 0):
            raise ValueError("weights must be positive, one per time")
        if res.shape != (self.pole_set.degree, times.size):
            raise ValueError(
                f"residue table shape {res.shape} != "
                f"({self.pole_set.degree}, {times.size})"
            )
        if not self.t_scale > 0:
            raise ValueError("t_scale must be positive")
        res = res.copy()
        kinds = self.pole_set.kinds
        i = 0
        while i < len(kinds):
            if kinds[i] == "real":
                res[i] = res[i].real
                i += 1
            else:
                res[i + 1] = np.conj(res[i])
                i += 2
        absolute = self.absolute_term
        if absolute is not None:
            absolute = np.atleast_1d(np.asarray(absolute, dtype=float))
            if absolute.shape != times.shape:
                raise ValueError("absolute_term must have one entry per time")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "residues", res)
        object.__setattr__(self, "absolute_term", absolute)
        object.__setattr__(self, "t_scale", float(self.t_scale))

    @classmethod
    def from_poles(
        cls,
        poles,
        residues,
        times,
        weights=None,
        t_scale: float | None = None,
        absolute_term=None,
        meta=None,
    ) -> RationalFamily:
        """Build a family from poles in arbitrary order (residue rows follow)."""
        poles = np.asarray(poles, dtype=complex).ravel()
        res = np.asarray(residues, dtype=complex)
        if res.ndim == 1:
            res = res[:, None]
        if res.shape[0] != poles.size:
            raise ValueError(f"residue table shape {res.shape} has {res.shape[0]} rows "
                             f"for {poles.size} poles")
        ps = PoleSet.from_poles(poles)
        order = [int(np.argmin(np.abs(poles - q))) for q in ps.poles]
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if weights is None:
            weights = np.ones_like(times)
        if t_scale is None:
            t_scale = float(times[0])
        return cls(ps, times, weights, res[order], t_scale, absolute_term,
                   dict(meta or {}))

    @property
    def degree(self) -> int:
        return self.pole_set.degree

    @property
    def n_channels(self) -> int:
        return self.times.size

    @property
    def poles(self) -> np.ndarray:
        return self.pole_set.poles

    def shifts(self) -> np.ndarray:
        """Representative poles in the physical spectral variable ``x``."""
        return self.pole_set.representatives / self.t_scale

    def half_residues(self) -> np.ndarray:
        """Residue rows of the representative poles, in ``x`` units."""
        return self.residues[self.pole_set.representative_index] / self.t_scale

    def evaluate(self, x) -> np.ndarray:
        """Values of all channels at points ``x``; shape ``(len(x), K)``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = self.t_scale * x
        ps = self.pole_set
        rep = ps.representatives
        is_real = ps.representative_is_real
        half = self.residues[ps.representative_index]
        if np.any(is_real):
            rp = rep[is_real].real
            hit = np.abs(y[:, None] - rp[None, :]) <= 1e-14 * np.maximum(
                np.abs(rp[None, :]), np.abs(y[:, None])
            )
            if np.any(hit):
                raise PoleHitError("evaluation point coincides with a real pole")
        out = np.zeros((y.size, self.n_channels))
        if np.any(is_real):
            out += (1.0 / (y[:, None] - rep[is_real].real[None, :])) @ half[is_real].real
        if np.any(~is_real):
            g = 1.0 / (y[:, None] - rep[~is_real][None, :])
            out += 2.0 * (g @ half[~is_real]).real
        if self.absolute_term is not None:
            out += self.absolute_term[None, :]
        return out

    def default_grid(self) -> np.ndarray:
        return default_error_grid(self.times[-1] / self.t_scale) / self.t_scale

    def with_weights(self, weights) -> RationalFamily:
        return RationalFamily(self.pole_set, self.times, weights, self.residues,
                              self.t_scale, self.absolute_term, dict(self.meta))

    # serialization

    def to_dict(self) -> dict[str, Any]:
        return {
            "t_scale": self.t_scale,
            "times": self.times.tolist(),
            "weights": self.weights.tolist(),
            "poles": [[float(p.real), float(p.imag)] for p in self.poles],
            "residues": [
                [[float(a.real), float(a.imag)] for a in row] for row in self.residues
            ],
            "absolute_term": (
                None if self.absolute_term is None else self.absolute_term.tolist()
            ),
            "meta": _jsonable(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RationalFamily:
        poles = np.array([complex(re, im) for re, im in d["poles"]])
        res = np.array([[complex(re, im) for re, im in row] for row in d["residues"]])
        ps = PoleSet.from_poles(poles)
        if not np.array_equal(ps.poles, poles):
            order = [int(np.argmin(np.abs(poles - q))) for q in ps.poles]
            res = res[order]
        return cls(ps, np.array(d["times"]), np.array(d["weights"]), res,
                   d["t_scale"], d.get("absolute_term"), dict(d.get("meta") or {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> RationalFamily:
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> RationalFamily:
        return cls.from_json(Path(path).read_text())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def default_error_grid(tau_max: float = 1.0, n: int = 4000) -> np.ndarray:
    """``{0}`` plus ``n`` log-spaced points in ``[1e-6/tau_max, 1e6]`` (normalized)."""
    lo = np.log10(1e-6 / tau_max)
    return np.concatenate([[0.0], np.logspace(lo, 6.0, n)])


def eval_scalar(family: RationalFamily, time_index: int, x):
    """Value of channel ``time_index`` at ``x`` (scalar or array), real."""
    if not 0 <= time_index < family.n_channels:
        raise IndexError(f"time index {time_index} out of range")
    scalar = np.ndim(x) == 0
    vals = family.evaluate(np.atleast_1d(x))[:, time_index]
    return float(vals[0]) if scalar else vals


def _check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float).ravel()
    if g.size == 0:
        raise ValueError("empty error grid")
    if np.any(g < 0):
        raise ValueError("error grid must be nonnegative")
    return g


def sup_error(family: RationalFamily, time_index: int, grid=None) -> float:
    """Grid estimate of ``max_x |exp(-t_j x) - r_j(x)|`` over ``x >= 0``."""
    g = family.default_grid() if grid is None else _check_grid(grid)
    t = family.times[time_index]
    return float(np.max(np.abs(np.exp(-t * g) - eval_scalar(family, time_index, g))))


def uniform_error(family: RationalFamily, grid=None) -> ErrorReport:
    """Per-channel sup errors and their weighted maximum."""
    g = family.default_grid() if grid is None else _check_grid(grid)
    vals = family.evaluate(g)
    per = np.max(np.abs(np.exp(-np.outer(g, family.times)) - vals), axis=0)
    return ErrorReport(per, float(np.max(family.weights * per)), g, family.weights)
