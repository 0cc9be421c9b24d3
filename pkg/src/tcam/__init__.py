"""Temporal class activation maps for weakly supervised video object localization."""

__version__ = "0.1.0"
