"""Toy-scale multilingual text-to-image adapters on a frozen diffusion model."""

__version__ = "0.1.0"
