"""Discrete choice models whose utility includes a learned function of images."""

__version__ = "0.1.0"
