"""Cascaded super-resolution with SSIM loss and identity priors for face hallucination."""

__version__ = "0.1.0"
