"""Entropy production bounds for confined two-dimensional diffusions."""

__version__ = "0.1.0"
