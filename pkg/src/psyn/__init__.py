"""Deterministic desk-scale laboratory for distributed SGD synchronization strategies."""

__version__ = "0.1.0"
