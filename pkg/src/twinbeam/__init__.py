"""Simulation and analysis of noisy twin beams detected by a photon-counting camera."""

__version__ = "0.1.0"
