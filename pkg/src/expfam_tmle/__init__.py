"""Targeted maximum likelihood estimation with convex-likelihood submodels."""

__version__ = "0.1.0"

from .core import EstimateReport, TmleTrace, run_tmle
from .estimators import MedianRegressionTMLE, MissingMeanTMLE, ShiftEffectTMLE
from .exceptions import (
    BoundaryWarning,
    BracketError,
    CellUnreliableWarning,
    DataValidationError,
    NumericalError,
    PositivityError,
    QuadratureError,
    SeparationWarning,
    TMLEError,
)

__all__ = [
    "BoundaryWarning",
    "BracketError",
    "CellUnreliableWarning",
    "DataValidationError",
    "EstimateReport",
    "MedianRegressionTMLE",
    "MissingMeanTMLE",
    "NumericalError",
    "PositivityError",
    "QuadratureError",
    "SeparationWarning",
    "ShiftEffectTMLE",
    "TMLEError",
    "TmleTrace",
    "run_tmle",
    "__version__",
]
