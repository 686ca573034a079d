"""Crossed post-decoder refinement for salient object detection, in numpy."""
__version__ = "0.1.0"
