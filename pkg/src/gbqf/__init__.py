"""Simulation of graphon-coupled, continuously measured quantum particles."""

__version__ = "0.1.0"
