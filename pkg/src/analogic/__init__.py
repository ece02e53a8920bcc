"""Analogical image translation with a procedural fog testbed."""

__version__ = "0.1.0"
