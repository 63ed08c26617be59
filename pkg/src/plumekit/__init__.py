"""Hyperspectral methane plume enhancement and detection toolkit."""

__version__ = "0.1.0"
