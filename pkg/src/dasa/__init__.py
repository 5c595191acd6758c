"""Sparse stacked autoencoders with domain adaptation by systematic dropout."""

__version__ = "0.1.0"
