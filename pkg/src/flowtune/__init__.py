"""Desk-scale flow-matching lab: training, ODE solving, fine-tuning, certificates."""

__version__ = "0.1.0"
