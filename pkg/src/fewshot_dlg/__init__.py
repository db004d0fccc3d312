"""Few-shot goal-oriented dialogue generation with discrete latent dialogue codes."""

__version__ = "0.1.0"
