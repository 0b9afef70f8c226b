"""Multimodal (RGB, event, LiDAR) optical and scene flow with hierarchical fusion."""

__version__ = "0.1.0"
