"""Equivariance-regularised autoencoder latents at desk scale."""

__version__ = "0.1.0"
