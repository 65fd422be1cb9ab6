"""Laminates, staircase measures and piecewise-affine realizations for
matrix differential inclusions."""

__version__ = "0.1.0"
