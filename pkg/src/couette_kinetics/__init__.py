"""Kinetic solver for rarefied Taylor-Couette flow between rotating cylinders."""

__version__ = "0.1.0"
