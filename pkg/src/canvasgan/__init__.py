"""Recurrent canvas text-to-image GAN with a self-attended visual-semantic encoder."""

__version__ = "0.1.0"
