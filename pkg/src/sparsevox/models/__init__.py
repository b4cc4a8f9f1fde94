"""Data models for sparsevox."""

from sparsevox.models.detection import (
    BOX_FIELDS,
    STAGE_NAMES,
    DetectionBox,
    LossBreakdown,
    PRCurve,
    RunReport,
    wrap_angle,
)
from sparsevox.models.features import (
    SCALES,
    GaussianTargetMap,
    Heatmap,
    KeyVoxelSet,
    KVSet,
    NeighborSet,
    QuerySet,
    ScaleNeighbors,
    ScaleWeights,
)
from sparsevox.models.params import ParamSpec, ParamStore
from sparsevox.models.scene import CLASS_NAMES, NUM_CLASSES, ObjectClass, SceneSample, SceneSpec
from sparsevox.models.sparse import CoordIndex, PointCloud, SparseTensor2D, SparseTensor3D

__all__ = [
    "BOX_FIELDS",
    "CLASS_NAMES",
    "NUM_CLASSES",
    "SCALES",
    "STAGE_NAMES",
    "CoordIndex",
    "DetectionBox",
    "GaussianTargetMap",
    "Heatmap",
    "KVSet",
    "KeyVoxelSet",
    "LossBreakdown",
    "NeighborSet",
    "ObjectClass",
    "PRCurve",
    "ParamSpec",
    "ParamStore",
    "PointCloud",
    "QuerySet",
    "RunReport",
    "ScaleNeighbors",
    "ScaleWeights",
    "SceneSample",
    "SceneSpec",
    "SparseTensor2D",
    "SparseTensor3D",
    "wrap_angle",
]
