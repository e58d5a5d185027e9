"""Hybrid continuous/discrete latent motion prior on a planar toy world."""

__version__ = "0.1.0"
