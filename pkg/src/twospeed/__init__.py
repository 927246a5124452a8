"""Two-speed ensemble of a fast CNN and a slow vision transformer for image-chip classification."""

__version__ = "0.1.0"
