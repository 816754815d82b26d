"""Bayesian quantile regression with infinitesimal-jackknife standard errors."""

__version__ = "0.1.0"
