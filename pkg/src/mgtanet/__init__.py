"""Motion-guided temporal attention for LiDAR point-cloud sequences."""

__version__ = "0.1.0"
