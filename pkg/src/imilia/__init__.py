"""Interpretable multiple-instance learning for slide-level inflammation prediction."""

__version__ = "0.1.0"
