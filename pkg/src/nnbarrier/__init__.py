"""Probabilistic safety certificates and minimal controllers for neural-network dynamic models."""

__version__ = "0.1.0"
