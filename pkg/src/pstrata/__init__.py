"""Bayesian principal stratification for right-censored time-to-event outcomes."""

__version__ = "0.1.0"
