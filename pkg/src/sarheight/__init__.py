"""Object-based building height estimation from single SAR images."""

__version__ = "0.1.0"
