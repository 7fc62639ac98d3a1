"""Compressed in-context learning for tabular classification."""

__version__ = "0.1.0"
