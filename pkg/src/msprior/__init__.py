"""Marginally specified priors for nonparametric Bayesian models."""

__version__ = "0.1.0"
