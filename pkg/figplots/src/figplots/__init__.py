"""Figure rendering for icllab result CSVs."""

__version__ = "0.1.0"
