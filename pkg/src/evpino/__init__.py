"""Spectral parameter operator with an embedded differentiable EV power model."""

__version__ = "0.1.0"
