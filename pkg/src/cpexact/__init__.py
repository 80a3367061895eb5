"""Exact Bayesian inference for changepoint models with changepoint-induced independence."""

__version__ = "0.1.0"
