"""Continued-fraction generative network components."""

__version__ = "0.1.0"
