"""Numerical laboratory for symmetric exclusion and stirring processes."""

__version__ = "0.1.0"
