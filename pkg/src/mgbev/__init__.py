"""Motion-guided spatial-temporal BEV LiDAR detection on synthetic scenes."""

__version__ = "0.1.0"
