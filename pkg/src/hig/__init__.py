"""Hierarchical interlacement graphs for video interactivity understanding."""

__version__ = "0.1.0"
