"""Kernel-smoothed spatial Cramer-von Mises test for equality of distributions on lattices."""

__version__ = "0.1.0"
