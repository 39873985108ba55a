"""Desk-scale semantic-enriched latent visual reasoning pipeline."""

__version__ = "0.1.0"
