"""Marginal-function sensitivity for semilinear elliptic optimal control."""

__version__ = "0.1.0"
