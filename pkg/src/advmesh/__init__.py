"""Physically realizable adversarial mesh objects against LiDAR detectors."""

__version__ = "0.1.0"
