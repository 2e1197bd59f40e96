"""Numpy CNN micro-engine for probing how much ConvNets rely on spatial information."""

__version__ = "0.1.0"
