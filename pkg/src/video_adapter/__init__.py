"""Desk-scale probabilistic adaptation of diffusion models by score composition."""

__version__ = "0.1.0"
