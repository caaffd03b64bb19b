"""Multi-round referring-segmentation dataset compiler and scorer."""

__version__ = "0.1.0"
