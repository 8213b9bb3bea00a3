"""Desk-scale diffusion inversion lab: DDIM, CFG, null-text optimisation and noise-map guidance."""

__version__ = "0.1.0"
