"""VSLAN: stacked local attention networks for diverse video captioning."""

__version__ = "1.0.0"
