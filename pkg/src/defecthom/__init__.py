"""Invariant measures, correctors and homogenized coefficients for
advection-diffusion operators whose coefficients are periodic plus a
localized defect."""

from .coefficients import CoefficientSet, build_family, validate
from .fields import BoxGrid, Field, TorusGrid, annular_profile, differentiate, lq_norm, mean

__version__ = "0.1.0"

__all__ = [
    "BoxGrid",
    "CoefficientSet",
    "Field",
    "TorusGrid",
    "annular_profile",
    "build_family",
    "differentiate",
    "lq_norm",
    "mean",
    "validate",
    "__version__",
]
