"""Attention-based multiple instance learning with hard negative bag mining."""

__version__ = "0.1.0"
