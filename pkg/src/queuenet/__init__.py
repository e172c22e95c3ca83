"""Simulation-labeled neural surrogates for multi-server queue occupancy."""

__version__ = "0.1.0"
