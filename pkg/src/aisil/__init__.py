"""Density-tempered sequential Monte Carlo for state-space models."""

__version__ = "0.1.0"
