"""Sensitivity-uncertainty alignment workbench on synthetic latent-ambiguity tasks."""

__version__ = "0.1.0"
