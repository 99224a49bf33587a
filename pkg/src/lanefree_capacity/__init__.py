"""Capacity of four-legged intersections under lane-free cooperative
crossing and under signal control."""

__version__ = "0.1.0"
