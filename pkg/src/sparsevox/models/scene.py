"""Synthetic scene data models: scene parameters and generated samples."""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple

from sparsevox.models.detection import DetectionBox
from sparsevox.models.sparse import PointCloud


class ObjectClass(Enum):
    """Reduced three-class taxonomy."""
    CAR = 0
    PEDESTRIAN = 1
    CYCLIST = 2


CLASS_NAMES = tuple(c.name.lower() for c in ObjectClass)
NUM_CLASSES = len(CLASS_NAMES)

# (l, w, h) mean and std in meters
CLASS_SIZE_MEAN = ((4.2, 1.8, 1.6), (0.8, 0.7, 1.75), (1.8, 0.6, 1.7))
CLASS_SIZE_STD = ((0.3, 0.1, 0.1), (0.1, 0.1, 0.1), (0.15, 0.05, 0.1))


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a synthetic LiDAR scene.

    Object point counts fall with range as ``object_density / range^2``,
    clipped to [min_object_points, max_object_points].
    """

    n_objects: Tuple[int, int, int] = (4, 2, 2)  # car, pedestrian, cyclist
    size_mean: Tuple[Tuple[float, float, float], ...] = CLASS_SIZE_MEAN
    size_std: Tuple[Tuple[float, float, float], ...] = CLASS_SIZE_STD
    object_density: float = 8000.0
    min_object_points: int = 5
    max_object_points: int = 250
    ground_points: int = 1200
    ground_z: float = -1.7
    ground_min_range: float = 2.0
    clutter_points: int = 300
    min_object_range: float = 4.0
    point_range: Tuple[float, float, float, float, float, float] = (0.0, -20.48, -3.0, 40.96, 20.48, 1.0)
    placement_attempts: int = 1000
    seed: int = 0

    def __post_init__(self):
        if len(self.n_objects) != len(ObjectClass):
            raise ValueError(f"n_objects needs one count per class ({len(ObjectClass)})")
        if any(n < 0 for n in self.n_objects):
            raise ValueError("Object counts must be >= 0")
        for name in ("object_density", "ground_points", "clutter_points", "min_object_points"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_object_points < max(self.min_object_points, 5):
            raise ValueError("max_object_points must be >= max(min_object_points, 5)")
        if self.placement_attempts < 1:
            raise ValueError("placement_attempts must be >= 1")
        lo, hi = self.point_range[:3], self.point_range[3:]
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("point_range max must exceed min on every axis")


@dataclass
class SceneSample:
    """Generated point cloud with its ground-truth boxes."""

    cloud: PointCloud
    boxes: List[DetectionBox] = field(default_factory=list)
    seed: int = 0
    placement_failures: int = 0

    @property
    def num_objects(self) -> int:
        return len(self.boxes)
