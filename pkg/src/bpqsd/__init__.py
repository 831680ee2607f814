"""Quasi-stationary behaviour of small-noise Binomial-Poisson population chains."""
from . import flow, ldp, model, qsd, simulate
from .model import ModelSpec, beverton_holt, ricker, shipped_1d, shipped_bistable_2d, tabulate

__all__ = ["flow", "ldp", "model", "qsd", "simulate", "ModelSpec", "beverton_holt", "ricker",
           "shipped_1d", "shipped_bistable_2d", "tabulate"]
__version__ = "0.1.0"
