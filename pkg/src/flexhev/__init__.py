"""Flexible-demand energy management for a power-split hybrid, by approximate dynamic programming."""

__version__ = "0.1.0"
