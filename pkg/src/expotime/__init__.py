"""Shared-pole rational evaluation of exp(-t M^-1 K) b over many time channels."""

from expotime.ratcore import (
    ErrorReport,
    PoleHitError,
    PoleSet,
    RationalFamily,
    eval_scalar,
    sup_error,
    uniform_error,
)

__all__ = [
    "ErrorReport",
    "PoleHitError",
    "PoleSet",
    "RationalFamily",
    "eval_scalar",
    "sup_error",
    "uniform_error",
]

__version__ = "0.1.0"
