"""Minimal-degree searches and the degree table with its K* row."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..ratcore import sup_error
from .best import fit_single_time_best
from .shared import get_fitter
from .types import SearchCapError, Surrogate, weight_preset

DEFAULT_ACCURACIES = (1e-2, 1e-4, 1e-6, 1e-8, 1e-10)
DEFAULT_RATIOS = (1.0, 1e1, 1e2, 1e3, 1e4, 1e5)
DEGREE_CAP = 80
SINGLE_TIME_CAP = 40


def channel_tau(ratio: float, n_channels: int = 31) -> np.ndarray:
    if ratio < 1:
        raise ValueError("ratio must be at least 1")
    if ratio == 1:
        return np.array([1.0])
    return np.logspace(0.0, np.log10(ratio), n_channels)


def single_time_error(m: int) -> float:
    return sup_error(fit_single_time_best(m), 0)


def family_error(degree: int, ratio: float, weights_rule: str = "unit",
                 n_channels: int = 31, surrogate: Surrogate | None = None) -> float:
    """Unweighted uniform error of the shared-pole fit of a given degree."""
    tau = channel_tau(ratio, n_channels)
    fitter = get_fitter(tau, weight_preset(weights_rule, tau), surrogate)
    return fitter.uniform_error(degree)


def minimal_degree(target_tol: float, ratio: float, weights_rule: str = "unit",
                   n_channels: int = 31, surrogate: Surrogate | None = None,
                   cap: int = DEGREE_CAP) -> int:
    """Smallest degree whose fit reaches ``target_tol`` in unweighted uniform error.

    Ratio 1 uses the single-time [m/m] baseline. Wider ratios search even
    degrees of the shared-pole family, then try the odd degree just below.
    """
    if not 1e-12 <= target_tol <= 1e-1:
        raise ValueError("target_tol must lie in [1e-12, 1e-1]")
    if ratio < 1:
        raise ValueError("ratio must be at least 1")
    if ratio == 1:
        for m in range(2, min(cap, SINGLE_TIME_CAP) + 1):
            if single_time_error(m) <= target_tol:
                return m
        raise SearchCapError(f"no [m/m] degree up to {min(cap, SINGLE_TIME_CAP)} "
                             f"reaches {target_tol:g}")
    for deg in range(2, cap + 1, 2):
        if family_error(deg, ratio, weights_rule, n_channels, surrogate) <= target_tol:
            if deg > 2 and family_error(deg - 1, ratio, weights_rule, n_channels,
                                        surrogate) <= target_tol:
                return deg - 1
            return deg
    raise SearchCapError(f"no degree up to {cap} reaches {target_tol:g} at ratio {ratio:g}")


@dataclass
class DegreeTable:
    """Minimal degrees by accuracy (rows) and ratio (columns).

    Missing or failed cells are ``None``.
    """

    accuracies: tuple
    ratios: tuple
    entries: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def get(self, accuracy, ratio):
        return self.entries.get((float(accuracy), float(ratio)))

    def column(self, ratio) -> list:
        return [self.get(a, ratio) for a in self.accuracies]

    def is_monotone(self) -> bool:
        for r in self.ratios:
            col = [v for v in self.column(r) if v is not None]
            if any(b < a for a, b in zip(col, col[1:])):
                return False
        return True

    def to_csv(self, k_star: dict | None = None) -> str:
        head = "accuracy," + ",".join(f"{r:g}" for r in self.ratios)
        lines = [head]
        for a in self.accuracies:
            cells = []
            for r in self.ratios:
                v = self.get(a, r)
                cells.append("FAIL" if (float(a), float(r)) in self.failures
                             else ("" if v is None else str(v)))
            lines.append(f"{a:g}," + ",".join(cells))
        if k_star is not None:
            cells = ["-" if k_star.get(float(r)) is None else f"{k_star[float(r)]:.1f}"
                     for r in self.ratios]
            lines.append("avg K*," + ",".join(cells))
        return "\n".join(lines) + "\n"


def critical_K(table: DegreeTable, accuracies=None) -> dict:
    """Average of ceil(m_hat/2)/ceil(m/2) over accuracy rows, per ratio.

    ``m`` is the ratio-1 (single-time) degree of the same row; ratio 1
    itself maps to ``None``.
    """
    rows = table.accuracies if accuracies is None else accuracies
    if 1.0 not in [float(r) for r in table.ratios]:
        raise ValueError("the table needs the ratio-1 column to define K*")
    out = {}
    for r in table.ratios:
        r = float(r)
        if r == 1.0:
            out[r] = None
            continue
        vals = []
        for a in rows:
            m, mh = table.get(a, 1.0), table.get(a, r)
            if m is None or mh is None:
                raise ValueError(f"missing cell for accuracy {a:g}, ratio {r:g}")
            vals.append(math.ceil(mh / 2) / math.ceil(m / 2))
        out[r] = float(np.mean(vals))
    return out


def degree_table(accuracies=DEFAULT_ACCURACIES, ratios=DEFAULT_RATIOS,
                 weights_rule: str = "unit", n_channels: int = 31,
                 surrogate: Surrogate | None = None, workers: int = 1,
                 cap: int = DEGREE_CAP) -> DegreeTable:
    """Fill the table; columns are independent and may run concurrently."""
    table = DegreeTable(tuple(float(a) for a in accuracies), tuple(float(r) for r in ratios))

    def column(r):
        out = {}
        for a in sorted(table.accuracies, reverse=True):
            try:
                out[(a, r)] = minimal_degree(a, r, weights_rule, n_channels, surrogate, cap)
            except SearchCapError as exc:
                out[(a, r)] = exc
        return out

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for cells in pool.map(column, table.ratios):
            for key, v in cells.items():
                if isinstance(v, Exception):
                    table.failures[key] = str(v)
                    table.entries[key] = None
                else:
                    table.entries[key] = v
    return table
