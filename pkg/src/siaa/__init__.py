"""Surrogate feature-space adversarial attacks on frozen-backbone synthetic-image detectors."""

__version__ = "0.1.0"
