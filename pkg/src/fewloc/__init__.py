"""Weakly-supervised few-shot temporal action localization over precomputed
two-stream snippet features."""

__version__ = "0.1.0"
