"""Numerical laboratory for infrared behaviour of the Nelson model with variable mass."""

__version__ = "0.1.0"
