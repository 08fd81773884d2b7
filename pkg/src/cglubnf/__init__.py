"""Bayesian neural-field forecasting for incomplete station networks."""

__version__ = "0.1.0"
