"""Monotonic multihead attention toolkit for simultaneous translation."""

__version__ = "0.1.0"
