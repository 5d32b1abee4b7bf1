"""Maximum-entropy manifold exploration with score-based diffusion models."""

__version__ = "0.1.0"
