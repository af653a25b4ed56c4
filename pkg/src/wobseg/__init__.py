"""Segmentation of glands without basal cells on synthetic whole-slide data."""

__version__ = "0.1.0"
