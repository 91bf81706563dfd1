"""Depth-error detection and correction for monocular depth predictions."""

__version__ = "0.1.0"
