"""Numerical toolkit for stochastic optimal transport and Schrödinger bridges."""

__version__ = "0.1.0"
