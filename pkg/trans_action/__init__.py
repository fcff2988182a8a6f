"""Hierarchical attention model for egocentric action anticipation."""

__version__ = "1.0.0"
