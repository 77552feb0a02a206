"""View-invariant stochastic prototype embeddings for multiview objects."""

__version__ = "0.1.0"
