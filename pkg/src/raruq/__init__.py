"""Uncertainty quantification for retrieval-augmented reasoning agents via reasoning-path perturbation."""

__version__ = "0.1.0"
