"""Desk-scale self-supervised flow matching with dual-timestep noising."""

__version__ = "0.1.0"
