"""CPU LiDAR SLAM against an online-trained neural density field."""

__version__ = "0.1.0"
