"""Panoptic object style-align image-to-image translation, desk scale."""

__version__ = "0.1.0"
