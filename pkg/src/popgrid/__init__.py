"""Gridded population estimation from satellite imagery and microcensus."""

__version__ = "0.1.0"
