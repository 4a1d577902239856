"""Desk-scale simulation toolkit for analog in-memory computing
inference and hardware-aware training."""

__version__ = "0.1.0"
