"""Offline behavior proximal policy optimization on desk-scale worlds, with exact tabular checks."""

__version__ = "0.1.0"
