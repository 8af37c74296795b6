"""Unsupervised shape/pose disentanglement for registered triangle meshes."""

__version__ = "0.1.0"

