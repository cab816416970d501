"""Blind image-quality ranking trained on intra-database pairs with the fidelity loss."""

__version__ = "0.1.0"
