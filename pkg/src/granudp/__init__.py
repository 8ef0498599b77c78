"""Sentence- vs document-level DP-SGD for dialogue translation, at desk scale."""

__version__ = "0.1.0"
