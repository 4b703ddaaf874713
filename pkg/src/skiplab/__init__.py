"""Desk-scale diffusion lab for skip-connection scaling experiments."""

__version__ = "0.1.0"
