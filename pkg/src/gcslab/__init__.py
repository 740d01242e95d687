"""Simulator and bound checker for gradient clock synchronization."""

__version__ = "0.1.0"
