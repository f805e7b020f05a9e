"""Realized-variance derivative pricing on a continuous-time Markov chain lattice."""

from .lattice import (
    BetaCurve, GridSpec, LatticeError, LatticeState, ModelConfig, Outlook, RateCurve, VolRegime,
    build_stock_grid, calibrate_and_assemble, validate_generator,
)
from .model import MarkovModel, build_explicit_model, build_lattice_model
from .moments import Corridor, bivariate_moments, build_functional, moments_exact, moments_fd
from .pricers import ContractSpec, PriceReport, PricingOptions, price

__version__ = "0.1.0"

__all__ = [
    "BetaCurve", "ContractSpec", "Corridor", "GridSpec", "LatticeError", "LatticeState", "MarkovModel",
    "ModelConfig", "Outlook", "PriceReport", "PricingOptions", "RateCurve", "VolRegime",
    "bivariate_moments", "build_explicit_model", "build_functional", "build_lattice_model",
    "build_stock_grid", "calibrate_and_assemble", "moments_exact", "moments_fd", "price",
    "validate_generator",
]
