"""Discrete and continuum Schelling segregation dynamics."""

__version__ = "0.1.0"
