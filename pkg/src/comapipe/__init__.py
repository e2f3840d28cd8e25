"""Coma outcome prediction after cardiac arrest from clinical data and EEG."""

__version__ = "0.1.0"
