"""Rational approximants of exp(-t x): shared-pole families and single-time baselines."""

from .best import cf_poles, fit_single_time_best
from .degree import (DegreeTable, channel_tau, critical_K, degree_table, family_error,
                     minimal_degree, single_time_error)
from .shared import SharedPoleFitter, fit_shared_poles, get_fitter
from .types import (EquilibrationError, FitConfig, FitDivergenceError, IllPosedFitError,
                    SearchCapError, Surrogate, log_times, weight_preset)

__all__ = [
    "DegreeTable", "EquilibrationError", "FitConfig", "FitDivergenceError",
    "IllPosedFitError", "SearchCapError", "SharedPoleFitter", "Surrogate",
    "cf_poles", "channel_tau", "critical_K", "degree_table", "family_error",
    "fit_shared_poles", "fit_single_time_best", "get_fitter", "log_times",
    "minimal_degree", "single_time_error", "weight_preset",
]
