"""Scribble-supervised salient object detection with synthetic concave regions, at desk scale."""

__version__ = "0.1.0"
