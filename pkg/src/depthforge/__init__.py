"""Synthetic emotional depth-face generation on a desk-scale numpy stack."""

__version__ = "0.1.0"

CLASSES = ("neutral", "happy", "fear")
