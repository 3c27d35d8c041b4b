"""Hyperbolic self-paced learning for skeleton sequences, on numpy."""

__version__ = "0.1.0"
