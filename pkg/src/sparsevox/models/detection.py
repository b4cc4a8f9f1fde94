"""Detection result data models for sparsevox.

Boxes, precision/recall curves, loss breakdowns and run reports used by the
heads, the training kit, the evaluation kit and the CLI.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

BOX_FIELDS = ("cx", "cy", "cz", "l", "w", "h", "yaw", "cls", "score")


def wrap_angle(yaw: float) -> float:
    """Map an angle into (-pi, pi]."""
    wrapped = math.remainder(yaw, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass
class DetectionBox:
    """Oriented 3D box: center (m), size (m), yaw (rad), class id, confidence."""

    cx: float
    cy: float
    cz: float
    l: float  # noqa: E741
    w: float
    h: float
    yaw: float = 0.0
    cls: int = 0
    score: float = 1.0

    def __post_init__(self):
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"Box sizes must be positive, got ({self.l}, {self.w}, {self.h})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"Box confidence must lie in [0, 1], got {self.score}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.cz, self.yaw)):
            raise ValueError("Box center and yaw must be finite")
        self.yaw = wrap_angle(self.yaw)
        self.cls = int(self.cls)

    @property
    def center(self) -> Tuple[float, float, float]:
        return (self.cx, self.cy, self.cz)

    @property
    def size(self) -> Tuple[float, float, float]:
        return (self.l, self.w, self.h)

    @property
    def bev_range(self) -> float:
        """Distance of the center from the sensor origin in the ground plane."""
        return math.hypot(self.cx, self.cy)

    @property
    def z_extent(self) -> Tuple[float, float]:
        return (self.cz - self.h / 2.0, self.cz + self.h / 2.0)

    def bev_corners(self) -> np.ndarray:
        """4x2 corner array, counter-clockwise, length along the heading axis."""
        half = np.array([
            [self.l / 2, self.w / 2],
            [-self.l / 2, self.w / 2],
            [-self.l / 2, -self.w / 2],
            [self.l / 2, -self.w / 2],
        ])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rotation = np.array([[c, -s], [s, c]])
        return half @ rotation.T + np.array([self.cx, self.cy])

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of the Nx3 ``points`` lying inside the box."""
        local = points[:, :2] - np.array([self.cx, self.cy])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        u = local[:, 0] * c + local[:, 1] * s
        v = -local[:, 0] * s + local[:, 1] * c
        z_lo, z_hi = self.z_extent
        return (
            (np.abs(u) <= self.l / 2 + margin)
            & (np.abs(v) <= self.w / 2 + margin)
            & (points[:, 2] >= z_lo - margin)
            & (points[:, 2] <= z_hi + margin)
        )

    def to_record(self) -> Dict[str, float]:
        """Exchange record with exactly the JSON schema fields."""
        return {
            "cx": float(self.cx),
            "cy": float(self.cy),
            "cz": float(self.cz),
            "l": float(self.l),
            "w": float(self.w),
            "h": float(self.h),
            "yaw": float(self.yaw),
            "cls": int(self.cls),
            "score": float(self.score),
        }


@dataclass
class PRCurve:
    """Precision/recall samples in descending-confidence order and the R40 AP."""

    precision: np.ndarray
    recall: np.ndarray
    ap: float
    num_gt: int = 0
    num_tp: int = 0

    def __post_init__(self):
        if len(self.recall) > 1 and np.any(np.diff(self.recall) < 0):
            raise ValueError("Recall must be nondecreasing")
        if len(self.precision) and (self.precision.min() < 0 or self.precision.max() > 1):
            raise ValueError("Precision must lie in [0, 1]")


@dataclass
class LossBreakdown:
    """Per-step loss terms; total = heatmap_loss + reg_weight * reg_loss."""

    voxel_heatmap_loss: float
    query_heatmap_loss: float
    reg_loss: float
    reg_weight: float
    positives: int
    matched_queries: int = 0

    @property
    def heatmap_loss(self) -> float:
        return self.voxel_heatmap_loss + self.query_heatmap_loss

    @property
    def total(self) -> float:
        return self.heatmap_loss + self.reg_weight * self.reg_loss

    def as_row(self) -> Dict[str, float]:
        return {
            "total": self.total,
            "heatmap_loss": self.heatmap_loss,
            "voxel_heatmap_loss": self.voxel_heatmap_loss,
            "query_heatmap_loss": self.query_heatmap_loss,
            "reg_loss": self.reg_loss,
            "positives": self.positives,
            "matched_queries": self.matched_queries,
        }


STAGE_NAMES = ("voxelize", "backbone", "lmfa", "gfa", "heads", "postprocess")


@dataclass
class RunReport:
    """Wall time, active-site counts and memory estimate of one inference run."""

    stage_ms: Dict[str, float] = field(default_factory=lambda: {s: 0.0 for s in STAGE_NAMES})
    active_sites: Dict[str, int] = field(default_factory=dict)
    peak_memory_bytes: int = 0
    detection_count: int = 0
    num_parameters: int = 0
    precision_bits: int = 64
    source: Optional[str] = None

    def __post_init__(self):
        if set(self.stage_ms) != set(STAGE_NAMES):
            raise ValueError(f"Stage list is fixed to {STAGE_NAMES}")
        if any(v < 0 for v in self.stage_ms.values()):
            raise ValueError("Stage times must be >= 0")

    @property
    def total_ms(self) -> float:
        return float(sum(self.stage_ms.values()))

    def to_dict(self) -> Dict:
        return {
            "source": self.source,
            "stages": [{"name": s, "ms": round(self.stage_ms[s], 3)} for s in STAGE_NAMES],
            "total_ms": round(self.total_ms, 3),
            "active_sites": dict(self.active_sites),
            "peak_memory_bytes": int(self.peak_memory_bytes),
            "detection_count": int(self.detection_count),
            "num_parameters": int(self.num_parameters),
            "precision_bits": int(self.precision_bits),
        }
