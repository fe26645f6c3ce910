"""Numerical tools for small-noise large deviations of hypoelliptic diffusions."""

__version__ = "0.1.0"
