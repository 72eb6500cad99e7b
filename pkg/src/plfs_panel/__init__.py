"""Longitudinal panels from rotating labour-survey visit files, and gross-flow estimation on them."""

__version__ = "0.1.0"
