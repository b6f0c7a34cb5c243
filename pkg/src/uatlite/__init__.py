"""Uncertainty-weighted self-attention laboratory on a toy transformer encoder."""

__version__ = "0.1.0"
