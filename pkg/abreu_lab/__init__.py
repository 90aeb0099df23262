"""Numerical toolkit for the generalized Abreu equation on convex polytopes."""

__version__ = "0.3.0"
