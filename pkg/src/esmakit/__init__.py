"""Density-guided targeted transfer attacks and a watermark security harness."""

__version__ = "0.1.0"
