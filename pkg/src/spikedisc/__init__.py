"""Spiking neural networks with L2-normalized feature discrimination."""

__version__ = "0.1.0"
