"""Similarity-based agnostic multi-class object counting on synthetic shape images."""

__version__ = "0.1.0"
