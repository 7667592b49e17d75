"""Barometric altimetry and altitude-constrained ICP."""

__version__ = "0.1.0"
