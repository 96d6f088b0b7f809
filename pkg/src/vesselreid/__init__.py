"""Viewpoint-independent vessel re-identification engine."""

__version__ = "0.1.0"
