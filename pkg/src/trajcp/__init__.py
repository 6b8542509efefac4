"""Collision probability estimation by adaptive mixture importance sampling."""

__version__ = "0.1.0"
