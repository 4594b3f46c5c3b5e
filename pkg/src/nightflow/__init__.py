"""Nighttime optical flow from day frames and events on synthetic scenes."""

__version__ = "0.1.0"
