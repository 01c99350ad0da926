"""Metropolis dynamics on the Random Energy Model: simulation and checks."""

__version__ = "0.1.0"
