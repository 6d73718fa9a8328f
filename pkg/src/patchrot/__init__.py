"""Patch-rotation self-supervised pretext tasks at desk scale."""

__version__ = "0.1.0"
