"""Desk-scale adversarial ML testbed for physical-layer wireless models."""

__version__ = "0.1.0"
