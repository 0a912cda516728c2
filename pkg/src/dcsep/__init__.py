"""Deep-clustering speech separation with end-to-end signal approximation."""

__version__ = "0.1.0"
