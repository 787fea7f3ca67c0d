"""Desk-scale white-matter tract segmentation toolkit."""

__version__ = "0.1.0"
