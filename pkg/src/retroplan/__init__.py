"""Retrosynthetic planning with dual value networks on a synthetic reaction world."""

__version__ = "0.1.0"
