"""Multilevel logistic cluster-weighted models with dependent binary covariates."""

__version__ = "0.1.0"
