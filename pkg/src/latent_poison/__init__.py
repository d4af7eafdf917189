"""Latent-space poisoning attacks against adversarially trained classifiers."""

__version__ = "0.1.0"
