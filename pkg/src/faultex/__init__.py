"""Fault-recovery explanation engine for simulated pick-and-place robots."""

__version__ = "0.1.0"
