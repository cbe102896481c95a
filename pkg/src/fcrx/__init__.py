"""Anatomically grounded fact checking of structured chest X-ray report findings."""

__version__ = "0.1.0"
