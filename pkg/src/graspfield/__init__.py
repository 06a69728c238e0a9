"""Grasp-distance fields with joint grasp and trajectory optimization."""

__version__ = "0.1.0"
