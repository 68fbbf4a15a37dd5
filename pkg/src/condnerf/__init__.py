"""Conditional compositional neural feature fields for 3D-aware image synthesis."""

__version__ = "0.1.0"
