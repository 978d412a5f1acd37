"""Lapse-management toolkit: survival step, CLV valuation, targeting models and scenario grids."""

__version__ = "0.1.0"
