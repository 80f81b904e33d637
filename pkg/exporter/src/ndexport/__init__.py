"""Bridge from the torch ecosystem to the novelty-detection engine's file formats."""

__version__ = "0.1.0"
