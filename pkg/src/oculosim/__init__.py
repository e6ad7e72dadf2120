"""Desk-scale ophthalmic world-model pipeline: phantom corpora, metrics and a toy latent diffusion simulator."""

__version__ = "0.1.0"
