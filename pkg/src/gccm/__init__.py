"""Graph label diffusion trained for one-step prediction with contrastive consistency."""

__version__ = "0.1.0"
