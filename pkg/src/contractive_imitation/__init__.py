"""Contractive dynamical-system imitation policies with certified loss bounds."""

__version__ = "0.1.0"
