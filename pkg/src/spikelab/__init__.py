"""Numerical laboratory for low-rank matrix estimation with diverging aspect ratio."""

__version__ = "0.1.0"
