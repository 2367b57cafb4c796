"""Multi-view 3D human pose estimation with a projective-attention transformer."""

__version__ = "0.1.0"
