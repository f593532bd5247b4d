"""Desk-scale diffusion training laboratory with cross-timestep attention
calibration and a fully synthetic, exactly-labeled compositional benchmark."""

__version__ = "0.1.0"
