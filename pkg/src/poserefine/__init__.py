"""Occlusion-robust refinement of articulated body poses with a temporal neural field."""

__version__ = "0.1.0"
