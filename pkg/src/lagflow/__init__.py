"""Pathwise Lagrangian laboratory for a stochastic free-boundary compressible flow model."""

__version__ = "0.1.0"
