"""Exponential phase functions, Mie reference data, slab Monte Carlo
rendering and analysis-by-synthesis parameter estimation."""

__version__ = "0.1.0"
