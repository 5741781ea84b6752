"""Exact calibration of local-volatility / stochastic-rate models by semimartingale optimal transport.

The engine maximises the dual of a constrained optimal-transport problem:
for Lagrange multipliers on the calibrating quotes an HJB equation is solved
backwards by policy iteration, and the multipliers are updated by L-BFGS
until every quote is matched to a tolerance in implied-vol units.
"""
from .dual import CalibrationConfig, CalibrationResult, calibrate
from .grid import Grid
from .instruments import Instrument, Kind, QuoteSet, prepare_quotes
from .optimisers import Bounds, Variant
from .pde import ModelSurfaces

__version__ = "0.1.0"

__all__ = [
    "Bounds", "CalibrationConfig", "CalibrationResult", "Grid", "Instrument", "Kind", "ModelSurfaces",
    "QuoteSet", "Variant", "calibrate", "prepare_quotes",
]
