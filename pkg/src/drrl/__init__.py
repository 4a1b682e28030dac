"""Adaptive-rank low-rank attention driven by a reinforcement-learned policy."""

__version__ = "0.1.0"
