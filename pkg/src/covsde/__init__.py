"""Finite-width shaped Transformers and their neural-covariance SDEs."""

__version__ = "0.1.0"
