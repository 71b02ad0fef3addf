"""Toy-scale video virtual try-on: latent diffusion with mask-guided attention, temporal fusion,
multi-scale garment features and pose-aligned dual branches."""

__version__ = "0.1.0"
