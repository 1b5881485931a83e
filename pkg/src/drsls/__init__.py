"""Distributionally robust system level synthesis for output-feedback affine policies."""

__version__ = "0.1.0"
