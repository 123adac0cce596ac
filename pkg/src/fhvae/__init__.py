"""Factorized hierarchical VAE with hierarchical sampling, on a small numpy autodiff core."""

__version__ = "0.1.0"
