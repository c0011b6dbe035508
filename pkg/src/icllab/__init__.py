"""Desk-scale lab for in-context learning across MLPs, Mixers, Transformers."""

__version__ = "0.1.0"
