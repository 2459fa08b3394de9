"""Hybrid first-principle / neural models of the arterial system."""

__version__ = "0.1.0"
