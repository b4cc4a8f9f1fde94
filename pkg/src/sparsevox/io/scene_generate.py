"""Synthetic LiDAR scenes with ground-truth boxes.

Objects are placed by rejection sampling without BEV overlap; their points
are drawn on the faces seen from the sensor with a count falling as
1/range^2, then a ground ring and uniform clutter are added. Every draw
comes from ``numpy.random.Generator(Philox(seed))`` so a (spec, seed) pair
reproduces the same scene on any platform.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon

from sparsevox.models.detection import DetectionBox
from sparsevox.models.scene import ObjectClass, SceneSample, SceneSpec
from sparsevox.models.sparse import PointCloud

logger = logging.getLogger(__name__)

_FACE_SHRINK = 0.98  # keeps face samples strictly inside their box
_PLACEMENT_GAP = 0.2  # m of free space between footprints
_GROUND_NOISE = 0.03


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


class SceneGenerator:
    """Deterministic synthetic scene generation."""

    @staticmethod
    def generate_scene(spec: SceneSpec, seed: Optional[int] = None) -> SceneSample:
        """Generate one scene.

        Args:
            spec: Scene recipe
            seed: RNG seed (default: ``spec.seed``)

        Returns:
            SceneSample whose boxes each contain at least five points. Objects
            that could not be placed are counted in ``placement_failures``.
        """
        seed = spec.seed if seed is None else seed
        rng = _rng(seed)

        boxes, failures = SceneGenerator.place_objects(spec, rng)
        chunks = [SceneGenerator.sample_object_points(box, spec, rng) for box in boxes]
        chunks.append(SceneGenerator.sample_ground(spec, rng))
        chunks.append(SceneGenerator.sample_clutter(spec, boxes, rng))
        points = np.concatenate(chunks, axis=0).astype(np.float32)

        lo = np.asarray(spec.point_range[:3], dtype=np.float32)
        hi = np.asarray(spec.point_range[3:], dtype=np.float32)
        points = points[np.all((points[:, :3] >= lo) & (points[:, :3] < hi), axis=1)]

        if failures:
            logger.warning("Scene seed %d: %d object(s) could not be placed", seed, failures)
        logger.debug("Scene seed %d: %d points, %d boxes", seed, len(points), len(boxes))
        return SceneSample(
            cloud=PointCloud(points, source_file=f"gen:{seed}"),
            boxes=boxes,
            seed=seed,
            placement_failures=failures,
        )

    @staticmethod
    def generate_scenes(spec: SceneSpec, seeds: Sequence[int], jobs: int = 1) -> List[SceneSample]:
        """Scenes for several seeds, in seed order regardless of ``jobs``."""
        if jobs <= 1:
            return [SceneGenerator.generate_scene(spec, s) for s in seeds]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda s: SceneGenerator.generate_scene(spec, s), seeds))

    @staticmethod
    def place_objects(spec: SceneSpec, rng: np.random.Generator) -> Tuple[List[DetectionBox], int]:
        """Rejection-sample non-overlapping boxes, class by class."""
        lo = np.asarray(spec.point_range[:3])
        hi = np.asarray(spec.point_range[3:])
        placed: List[DetectionBox] = []
        footprints: List[Polygon] = []
        failures = 0

        for cls in ObjectClass:
            mean = np.asarray(spec.size_mean[cls.value])
            std = np.asarray(spec.size_std[cls.value])
            for _ in range(spec.n_objects[cls.value]):
                box = None
                for _ in range(spec.placement_attempts):
                    size = np.maximum(rng.normal(mean, std), 0.5 * mean)
                    margin = 0.5 * math.hypot(size[0], size[1]) + 0.1
                    if np.any(lo[:2] + margin >= hi[:2] - margin):
                        continue
                    xy = rng.uniform(lo[:2] + margin, hi[:2] - margin)
                    yaw = rng.uniform(-math.pi, math.pi)
                    if math.hypot(xy[0], xy[1]) < spec.min_object_range:
                        continue
                    cz = spec.ground_z + size[2] / 2
                    if cz - size[2] / 2 < lo[2] or cz + size[2] / 2 >= hi[2]:
                        continue
                    candidate = DetectionBox(float(xy[0]), float(xy[1]), float(cz),
                                             float(size[0]), float(size[1]), float(size[2]),
                                             float(yaw), cls.value, 1.0)
                    polygon = Polygon(candidate.bev_corners())
                    if any(polygon.distance(other) < _PLACEMENT_GAP for other in footprints):
                        continue
                    box = candidate
                    footprints.append(polygon)
                    break
                if box is None:
                    failures += 1
                else:
                    placed.append(box)
        return placed, failures

    @staticmethod
    def object_point_count(box: DetectionBox, spec: SceneSpec) -> int:
        """``object_density / range^2`` clipped to the scene's bounds, never below 5."""
        r2 = max(box.bev_range, 1.0) ** 2
        floor = max(spec.min_object_points, 5)
        return int(np.clip(round(spec.object_density / r2), floor, spec.max_object_points))

    @staticmethod
    def sample_object_points(box: DetectionBox, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
        """Points on the side faces turned toward the sensor and on the top face."""
        n = SceneGenerator.object_point_count(box, spec)
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        hl, hw, hh = box.l / 2, box.w / 2, box.h / 2

        # (axis, sign, area); axis 0 = length, 1 = width, 2 = top
        faces = [(2, 1.0, box.l * box.w)]
        for axis, half in ((0, hl), (1, hw)):
            normal = np.array([c, s]) if axis == 0 else np.array([-s, c])
            for sign in (1.0, -1.0):
                face_center = np.array([box.cx, box.cy]) + sign * half * normal
                if float(np.dot(sign * normal, face_center)) < 0.0:
                    area = (box.w if axis == 0 else box.l) * box.h
                    faces.append((axis, sign, area))

        areas = np.array([f[2] for f in faces])
        pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
        a, b = rng.uniform(-_FACE_SHRINK, _FACE_SHRINK, size=(2, n))
        local = np.zeros((n, 3))
        for k, (axis, sign, _) in enumerate(faces):
            m = pick == k
            if axis == 0:
                local[m] = np.c_[np.full(m.sum(), sign * hl * _FACE_SHRINK), a[m] * hw, b[m] * hh]
            elif axis == 1:
                local[m] = np.c_[a[m] * hl, np.full(m.sum(), sign * hw * _FACE_SHRINK), b[m] * hh]
            else:
                local[m] = np.c_[a[m] * hl, b[m] * hw, np.full(m.sum(), hh * _FACE_SHRINK)]

        world = np.empty((n, 4))
        world[:, 0] = box.cx + local[:, 0] * c - local[:, 1] * s
        world[:, 1] = box.cy + local[:, 0] * s + local[:, 1] * c
        world[:, 2] = box.cz + local[:, 2]
        world[:, 3] = rng.uniform(0.3, 1.0, size=n)
        return world

    @staticmethod
    def sample_ground(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
        """Ground returns uniform in range and bearing, so density falls as 1/range."""
        n = spec.ground_points
        if n == 0:
            return np.zeros((0, 4))
        lo = np.asarray(spec.point_range[:2])
        hi = np.asarray(spec.point_range[3:5])
        corners = np.array([[x, y] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])])
        r_max = float(np.hypot(corners[:, 0], corners[:, 1]).max())
        angles = np.arctan2(corners[:, 1], corners[:, 0])
        full_circle = lo[0] < 0 < hi[0] and lo[1] < 0 < hi[1]
        theta_lo, theta_hi = (-math.pi, math.pi) if full_circle else (angles.min(), angles.max())

        out = np.zeros((0, 4))
        while len(out) < n:
            batch = 2 * (n - len(out))
            r = rng.uniform(spec.ground_min_range, r_max, size=batch)
            theta = rng.uniform(theta_lo, theta_hi, size=batch)
            pts = np.c_[
                r * np.cos(theta),
                r * np.sin(theta),
                spec.ground_z + rng.normal(0.0, _GROUND_NOISE, size=batch),
                rng.uniform(0.0, 0.3, size=batch),
            ]
            keep = np.all((pts[:, :2] >= lo) & (pts[:, :2] < hi), axis=1)
            out = np.concatenate([out, pts[keep]], axis=0)
        return out[:n]

    @staticmethod
    def sample_clutter(spec: SceneSpec, boxes: Sequence[DetectionBox], rng: np.random.Generator) -> np.ndarray:
        """Uniform background points up to 2.5 m above ground, kept out of every box."""
        n = spec.clutter_points
        if n == 0:
            return np.zeros((0, 4))
        lo = np.asarray(spec.point_range[:3])
        hi = np.asarray(spec.point_range[3:])
        z_hi = min(hi[2], spec.ground_z + 2.5)
        z_lo = max(lo[2], spec.ground_z)
        pts = np.c_[
            rng.uniform(lo[0], hi[0], size=n),
            rng.uniform(lo[1], hi[1], size=n),
            rng.uniform(z_lo, z_hi, size=n),
            rng.uniform(0.0, 1.0, size=n),
        ]
        inside = np.zeros(n, dtype=bool)
        for box in boxes:
            inside |= box.contains(pts[:, :3], margin=0.2)
        return pts[~inside]


def generate_scene(spec: SceneSpec, seed: Optional[int] = None) -> SceneSample:
    """Module-level shortcut for :meth:`SceneGenerator.generate_scene`."""
    return SceneGenerator.generate_scene(spec, seed)
