"""Closed-loop ranking-weight optimization toolkit."""

__version__ = "0.1.0"
