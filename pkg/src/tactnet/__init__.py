"""Tactile pressure-image classification with small from-scratch CNNs."""

__version__ = "0.1.0"
