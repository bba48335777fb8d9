"""Synthetic methane plume simulation, injection, retrieval and evaluation toolkit."""

__version__ = "0.1.0"
