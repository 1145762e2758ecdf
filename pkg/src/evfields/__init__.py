"""Deformable radiance fields from sparse RGB frames and event streams."""

__version__ = "0.1.0"
