"""Inductive reasoning over knowledge graphs that grow in batches of new entities."""

__version__ = "0.1.0"
