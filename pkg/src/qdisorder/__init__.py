"""Trajectory simulation of disordered driven-dissipative lattices."""

__version__ = "0.1.0"
