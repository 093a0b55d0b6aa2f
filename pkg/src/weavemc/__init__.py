"""Weave-Metropolis and Haar-Weave-Metropolis samplers with baseline kernels."""

__version__ = "0.1.0"
