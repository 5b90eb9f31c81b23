"""Causal network synthesis from short, noisy time series."""

__version__ = "0.1.0"
