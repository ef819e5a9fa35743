"""Dual-scale vision-language multiple-instance learning on patch-feature bags."""

__version__ = "0.1.0"
