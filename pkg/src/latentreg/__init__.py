"""Latent-space policy optimization for deformable registration at desk scale."""

__version__ = "0.1.0"
