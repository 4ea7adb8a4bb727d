"""Regularised Keller-Segel particle systems, their mean-field limit, and convergence diagnostics."""
__version__ = "0.1.0"
