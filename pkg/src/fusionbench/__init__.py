"""Multimodal fusion benchmark for thermal/RGB/LiDAR landscape-feature mapping."""

__version__ = "0.1.0"
