"""Numerical toolkit for Brownian motion and harmonic functions on treebolic space."""

__version__ = "0.1.0"
