"""Interacting particle systems, entropy estimators, and mean-field bounds."""

__version__ = "0.1.0"
