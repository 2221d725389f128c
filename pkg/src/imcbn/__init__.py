"""Crossbar deployment simulator with batchnorm-only accuracy recovery."""

__version__ = "0.1.0"
