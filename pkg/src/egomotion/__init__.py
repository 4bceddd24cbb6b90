"""Causal egocentric whole-body motion estimation with cascaded diffusion."""

__version__ = "0.1.0"
