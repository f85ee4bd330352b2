"""Point-based joint cell tracking with lineage evaluation."""

__version__ = "0.1.0"
