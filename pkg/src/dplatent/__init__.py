"""Differentially private synthetic image release through a low-dimensional latent GAN.

A public GAN is trained on public classes, private images are inverted into
its latent space, a small generator is trained on those latents with DP-SGD,
and synthetic images are decoded through the public generator.
"""
from .errors import DplatentError

__version__ = "0.1.0"
__all__ = ["DplatentError", "__version__"]
