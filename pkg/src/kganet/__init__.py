"""Keyframe-guided attention network for video classification with image guidance."""

__version__ = "0.1.0"
