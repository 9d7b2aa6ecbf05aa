"""Diffusion-based refinement of 7-DoF boxes over LiDAR-style point clouds."""

__version__ = "0.1.0"
