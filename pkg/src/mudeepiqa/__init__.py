"""Patch-based CNN image quality assessment for optical microscopy."""

__version__ = "0.1.0"
