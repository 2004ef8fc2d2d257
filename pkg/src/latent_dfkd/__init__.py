"""Data-free knowledge distillation with teacher-guided latent diffusion sampling."""

__version__ = "0.1.0"
