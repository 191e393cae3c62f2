"""Stateful detection of model-extraction query streams."""

__version__ = "0.1.0"
