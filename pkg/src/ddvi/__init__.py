"""Deep Gaussian processes with diffusion-based posterior inference over inducing variables."""

__version__ = "0.1.0"
