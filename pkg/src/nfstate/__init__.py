"""Simulated state management for replicated network functions."""

__version__ = "0.1.0"
