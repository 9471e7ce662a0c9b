"""Numerical laboratory for flows toward the Loewner-Nirenberg metric."""

__version__ = "0.1.0"
