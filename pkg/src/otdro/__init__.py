"""Solvers for optimal-transport distributionally robust optimization with affine decision rules."""

__version__ = "0.1.0"
