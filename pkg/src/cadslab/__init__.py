"""Condition-annealed diffusion sampling (CADS) and dynamic CFG on a 2D Gaussian mixture."""

__version__ = "0.1.0"
