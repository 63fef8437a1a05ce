"""Compressed chain-of-thought at desk scale."""

__version__ = "0.1.0"
