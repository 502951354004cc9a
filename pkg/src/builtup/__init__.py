"""Quarterly building density/height map products: smoothing, masking, evaluation."""

__version__ = "0.1.0"
