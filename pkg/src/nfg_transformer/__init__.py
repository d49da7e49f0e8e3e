"""Permutation-equivariant transformer encoders for normal-form games."""

__version__ = "0.1.0"
