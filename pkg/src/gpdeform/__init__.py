"""Sparse variational GP motion fields for deformable Gaussian primitives."""

__version__ = "0.1.0"
