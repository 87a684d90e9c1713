"""Numerical lab for age-structured diffusive population models."""

from .model import DensityField, Grid, ModelSpec, norm_e0, weighted_age_integral
from .ratelang import RateExpr, parse

__version__ = "0.1.0"

__all__ = [
    "DensityField",
    "Grid",
    "ModelSpec",
    "RateExpr",
    "norm_e0",
    "parse",
    "weighted_age_integral",
    "__version__",
]
