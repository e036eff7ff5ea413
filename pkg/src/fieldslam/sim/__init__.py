"""Synthetic LiDAR data: scenes, ray casting, and dataset generation."""

from .raycast import BVH, intersect_brute_force
from .scene import Scene, box_room, courtyard, get_scene, quad
from .lidar import NO_RETURN, LidarModel, LidarScan, cast_scan
from .dataset import Dataset, generate_sequence, load_dataset, save_dataset

__all__ = [
    "BVH",
    "intersect_brute_force",
    "Scene",
    "box_room",
    "courtyard",
    "quad",
    "get_scene",
    "NO_RETURN",
    "LidarModel",
    "LidarScan",
    "cast_scan",
    "Dataset",
    "generate_sequence",
    "save_dataset",
    "load_dataset",
]
