"""Intermediate feature containers passed between the LMFA and GFA stages."""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

SCALES = (4, 5, 6)  # backbone stages feeding the aggregation modules


@dataclass
class Heatmap:
    """Per-site, per-class foreground scores aligned row-for-row with the fused BEV tensor."""

    scores: np.ndarray
    logits: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError(f"Heatmap scores must be [N x Cls], got {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("Heatmap contains non-finite scores")
        if self.scores.size and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ValueError("Heatmap scores must lie in [0, 1]")

    @property
    def num_sites(self) -> int:
        return self.scores.shape[0]

    @property
    def ranking_score(self) -> np.ndarray:
        """Max over classes per site."""
        if self.num_sites == 0:
            return np.zeros(0)
        return self.scores.max(axis=1)


@dataclass
class KeyVoxelSet:
    """Selected key voxels: rows into the fused tensor, stride-8 coordinates, features, scores."""

    rows: np.ndarray
    coords: np.ndarray
    feats: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        if len(np.unique(self.rows)) != len(self.rows):
            raise ValueError("Key voxel rows must be unique")
        if not (len(self.coords) == len(self.feats) == len(self.scores) == len(self.rows)):
            raise ValueError("Key voxel fields must have one entry per key")

    @property
    def num_keys(self) -> int:
        return len(self.rows)


@dataclass
class ScaleNeighbors:
    """KNN result for one backbone scale.

    ``indices`` holds rows into that scale's BEV tensor (-1 for padding),
    ``mask`` is False on padded slots, ``feats`` is zero there.
    """

    scale: int
    indices: np.ndarray
    mask: np.ndarray
    feats: np.ndarray

    def __post_init__(self):
        if self.indices.shape != self.mask.shape:
            raise ValueError("Neighbor indices and mask must share a shape")
        if np.any(self.indices[~self.mask] != -1):
            raise ValueError("Padded neighbor slots must carry index -1")

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass
class NeighborSet:
    """Per-scale neighbor lists of all key voxels."""

    scales: Dict[int, ScaleNeighbors]

    def __getitem__(self, scale: int) -> ScaleNeighbors:
        return self.scales[scale]


@dataclass
class ScaleWeights:
    """Softmax weights over the three scales, one row per key."""

    weights: np.ndarray
    logits: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.weights.size and np.any(self.weights < 0):
            raise ValueError("Scale weights must be nonnegative")


@dataclass
class QuerySet:
    """GFA queries: features Q, base features F_query, stride-8 positions, embeddings."""

    feats: np.ndarray
    base_feats: np.ndarray
    pos: np.ndarray
    pe: np.ndarray
    rows: np.ndarray
    classes: np.ndarray
    # (normalized positions, hidden) of the position MLP, kept for backward
    pe_cache: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.rows)
        for name in ("feats", "base_feats", "pos", "pe", "classes"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"QuerySet.{name} must have {n} rows")

    @property
    def num_queries(self) -> int:
        return len(self.rows)

    def with_feats(self, feats: np.ndarray) -> "QuerySet":
        return QuerySet(
            feats=feats,
            base_feats=self.base_feats,
            pos=self.pos,
            pe=self.pe,
            rows=self.rows,
            classes=self.classes,
            pe_cache=self.pe_cache,
        )


@dataclass
class KVSet:
    """Fixed-size key/value bank; padded rows are zero with ``valid_mask`` False."""

    k_feats: np.ndarray
    v_feats: np.ndarray
    pos: np.ndarray
    valid_mask: np.ndarray
    rows: np.ndarray

    def __post_init__(self):
        n = len(self.valid_mask)
        if not (len(self.k_feats) == len(self.v_feats) == len(self.pos) == len(self.rows) == n):
            raise ValueError("KVSet fields must all have N_KV rows")

    @property
    def size(self) -> int:
        return len(self.valid_mask)

    @property
    def num_valid(self) -> int:
        return int(self.valid_mask.sum())


@dataclass
class GaussianTargetMap:
    """Per-site, per-class heatmap targets and the positive site of every kept object."""

    targets: np.ndarray
    positive_rows: np.ndarray
    positive_gt: np.ndarray
    skipped: int = 0

    def __post_init__(self):
        if self.targets.size and (self.targets.min() < 0 or self.targets.max() > 1):
            raise ValueError("Heatmap targets must lie in [0, 1]")

    @property
    def num_positives(self) -> int:
        return int(np.sum(self.targets == 1.0))
