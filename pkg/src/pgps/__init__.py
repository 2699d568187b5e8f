"""Patch-size curriculum engine for 3D patch-based segmentation training."""

__version__ = "0.1.0"
