"""Near-best type-[m/m] approximation of exp(-x) on [0, inf).

Poles come from Caratheodory-Fejer approximation (singular vector of a
Hankel matrix of Chebyshev-like coefficients after mapping [0, inf) to the
unit circle). Residues and the constant term are then refined by Lawson
reweighting on a dense grid until the error curve equioscillates.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.linalg import hankel, svd

from ..ratcore import RationalFamily
from .types import EquilibrationError
from .varpro import coefficients_to_residues, join_poles, real_basis, split_poles

ROUNDING_FLOOR = 5e-14
# beyond this degree the CF singular values drop below double precision
CF_MAX_DEGREE = 14


def cf_poles(m: int, n_coef: int = 75, n_fft: int = 1024, scale: float = 9.0) -> np.ndarray:
    """Poles (in x) of the CF approximant of exp(-x) of type [m/m]."""
    w = np.exp(2j * np.pi * np.arange(n_fft) / n_fft)
    t = w.real
    with np.errstate(divide="ignore", over="ignore"):
        F = np.exp(scale * (t - 1) / (t + 1 + 1e-16))
    c = np.real(np.fft.fft(F)) / n_fft
    _, _, Vh = svd(hankel(c[1:n_coef + 1]))
    v = Vh.conj().T[:, m]
    z = np.roots(v)
    q = z[np.abs(z) > 1]
    q = q[np.argsort(-np.abs(q))][:m]
    zk = scale * (q - 1) ** 2 / (q + 1) ** 2
    p = -zk
    near_real = np.abs(p.imag) <= 1e-8 * np.abs(p)
    p = np.where(near_real, p.real + 0j, p)
    # symmetrize pairs
    real, up = split_poles(p)
    if 2 * up.size + real.size != m:
        raise EquilibrationError(f"CF pole extraction failed for m={m}")
    return join_poles(real, up)


def _local_maxima(e: np.ndarray) -> np.ndarray:
    a = np.abs(e)
    inner = np.flatnonzero((a[1:-1] >= a[:-2]) & (a[1:-1] >= a[2:])) + 1
    ends = [i for i in (0, a.size - 1)
            if (i == 0 and a[0] >= a[1]) or (i == a.size - 1 and a[-1] >= a[-2])]
    return a[np.unique(np.concatenate([inner, ends]).astype(int))]


def equilibration_spread(e: np.ndarray, m: int) -> float:
    """Relative spread of the 2m+2 largest local maxima of |e|."""
    peaks = np.sort(_local_maxima(e))[::-1][: 2 * m + 2]
    return float((peaks[0] - peaks[-1]) / peaks[0])


def initial_poles(m: int) -> np.ndarray:
    """CF poles, padded with remote poles once CF is rounding-limited."""
    if m <= CF_MAX_DEGREE:
        return cf_poles(m)
    real, up = split_poles(cf_poles(CF_MAX_DEGREE))
    extra = m - CF_MAX_DEGREE
    mods = np.abs(up).max() * 1.25 ** np.arange(1, extra // 2 + 1)
    up = np.concatenate([up, mods * np.exp(0.75j * np.pi)])
    if extra % 2:
        real = np.concatenate([real, [-np.abs(up).max() * 1.25]])
    return join_poles(real, up)


@lru_cache(maxsize=64)
def _fit(m: int, tol_inner: float, max_iter: int):
    x = np.concatenate([[0.0], np.logspace(-4, 5, 6000)])
    f = np.exp(-x)
    real, up = split_poles(initial_poles(m))
    B = np.hstack([np.ones((x.size, 1)), real_basis(x, real, up)])
    cs = np.linalg.norm(B, axis=0)
    B = B / cs
    wts = np.full(x.size, 1.0 / x.size)
    spread = np.inf
    for it in range(1, max_iter + 1):
        sw = np.sqrt(wts)
        A = sw[:, None] * B
        coef = np.linalg.lstsq(A, sw * f, rcond=None)[0]
        for _ in range(3):
            coef += np.linalg.lstsq(A, sw * (f - B @ coef), rcond=None)[0]
        e = f - B @ coef
        emax = np.abs(e).max()
        spread = equilibration_spread(e, m)
        if it >= 20 and (spread <= tol_inner or emax <= ROUNDING_FLOOR):
            break
        wts = wts * np.abs(e)
        wts /= wts.sum()
    else:
        raise EquilibrationError(
            f"Lawson iteration for m={m} stalled with peak spread {spread:.3g}")
    coef = coef / cs
    return real, up, coef, float(emax), float(spread), it


def fit_single_time_best(m: int, tol_inner: float = 0.1, max_iter: int = 400) -> RationalFamily:
    """Type-[m/m] near-best approximant of exp(-x), returned as a t=1 family.

    ``tol_inner`` bounds the relative spread of the error peaks that the
    Lawson iteration must reach (errors at rounding level are accepted).
    """
    if not 2 <= m <= 40:
        raise ValueError("m must lie in [2, 40]")
    real, up, coef, emax, spread, it = _fit(int(m), float(tol_inner), int(max_iter))
    res = coefficients_to_residues(coef[1:], real.size, up.size)
    return RationalFamily.from_poles(
        join_poles(real, up), res, [1.0], [1.0], t_scale=1.0,
        absolute_term=[coef[0]],
        meta={"degree": int(m), "kind": "single-time", "lawson_error": emax,
              "peak_spread": spread, "lawson_iterations": it})
