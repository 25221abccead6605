"""Collective data staging and barrier-free many-task dataflow."""

__version__ = "0.1.0"
