"""Attention-based sequence-to-sequence recognition with supervised attention."""

__version__ = "0.1.0"
