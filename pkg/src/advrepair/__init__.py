"""Adversarial patch generation for single-line program repair."""

__version__ = "0.1.0"
