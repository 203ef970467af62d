"""Heston stochastic-local-volatility Monte Carlo with positivity-preserving
variance schemes (full-truncation Euler, exact noncentral chi-square,
truncated and drift-implicit Euler on the Lamperti transform)."""

from .engine import SlvConfig, default_market, derive_model_params, error_table, simulate_hslv
from .pricing import CallSurface, HestonParams, build_market_surface, cos_call_price, implied_vol
from .variance import CirParams, SchemeKind, TruncationSpec, VarianceIntegrator

__all__ = [
    "CallSurface",
    "CirParams",
    "HestonParams",
    "SchemeKind",
    "SlvConfig",
    "TruncationSpec",
    "VarianceIntegrator",
    "build_market_surface",
    "cos_call_price",
    "default_market",
    "derive_model_params",
    "error_table",
    "implied_vol",
    "simulate_hslv",
]

__version__ = "0.1.0"
