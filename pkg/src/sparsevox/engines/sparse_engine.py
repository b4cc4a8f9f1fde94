"""Sparse tensor engine: voxelization, height compression and index bookkeeping.

All operations return new tensors and never mutate their inputs.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from sparsevox.config.pipeline import VoxelGridConfig
from sparsevox.exceptions import IndexBookkeepingError
from sparsevox.models.sparse import (
    PointCloud,
    SparseTensor2D,
    SparseTensor3D,
    pack_coords,
    unpack_coords,
)

logger = logging.getLogger(__name__)


@dataclass
class VoxelizeStats:
    """Point accounting of one voxelization."""

    points_in: int = 0
    dropped_out_of_range: int = 0
    dropped_by_cap: int = 0
    active_voxels: int = 0


class SparseEngine:
    """Core operations on sparse voxel tensors."""

    @staticmethod
    def voxelize(pc: PointCloud, cfg: VoxelGridConfig) -> SparseTensor3D:
        """One active site per occupied voxel, feature = mean of its first points.

        Args:
            pc: Input sweep
            cfg: Voxel grid configuration

        Returns:
            Stride-1 SparseTensor3D with C=4 (x, y, z, intensity) features,
            sites in lexicographic coordinate order
        """
        tensor, _ = SparseEngine.voxelize_with_stats(pc, cfg)
        return tensor

    @staticmethod
    def voxelize_with_stats(
        pc: PointCloud, cfg: VoxelGridConfig
    ) -> Tuple[SparseTensor3D, VoxelizeStats]:
        """Same as :meth:`voxelize`, also returning the point accounting."""
        points = np.asarray(pc.points, dtype=np.float64)
        stats = VoxelizeStats(points_in=len(points))

        lo = np.asarray(cfg.range_min)
        hi = np.asarray(cfg.range_max)
        size = np.asarray(cfg.voxel_size)
        in_range = np.all((points[:, :3] >= lo) & (points[:, :3] < hi), axis=1)
        stats.dropped_out_of_range = int(len(points) - in_range.sum())
        points = points[in_range]

        if len(points) == 0:
            logger.debug("Voxelization produced no active sites (%d points dropped)",
                         stats.dropped_out_of_range)
            return SparseTensor3D(np.zeros((0, 3), np.int64), np.zeros((0, 4))), stats

        grid = np.asarray(cfg.grid_shape)
        coords = np.floor((points[:, :3] - lo) / size).astype(np.int64)
        coords = np.minimum(coords, grid - 1)  # float rounding at the upper edge
        keys = pack_coords(coords)

        # stable sort keeps arrival order within a voxel
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        starts = np.r_[0, np.flatnonzero(sorted_keys[1:] != sorted_keys[:-1]) + 1]
        group_start = np.repeat(starts, np.diff(np.r_[starts, len(sorted_keys)]))
        rank = np.arange(len(sorted_keys)) - group_start
        keep = rank < cfg.max_points_per_voxel
        stats.dropped_by_cap = int((~keep).sum())

        kept_keys = sorted_keys[keep]
        kept_points = points[order[keep]]
        unique_keys, inverse, counts = np.unique(kept_keys, return_inverse=True, return_counts=True)
        sums = np.zeros((len(unique_keys), 4))
        np.add.at(sums, inverse, kept_points)
        feats = sums / counts[:, None]

        stats.active_voxels = len(unique_keys)
        logger.debug("Voxelized %d points into %d sites (%d out of range, %d over cap)",
                     stats.points_in, stats.active_voxels,
                     stats.dropped_out_of_range, stats.dropped_by_cap)
        return SparseTensor3D(unpack_coords(unique_keys, 3), feats, stride=1), stats

    @staticmethod
    def height_compress(t: SparseTensor3D) -> SparseTensor2D:
        """Sum features over iz at every (ix, iy)."""
        out, _ = SparseEngine.height_compress_with_inverse(t)
        return out

    @staticmethod
    def height_compress_with_inverse(t: SparseTensor3D) -> Tuple[SparseTensor2D, np.ndarray]:
        """Height compression plus the input-row -> output-row map used by backward."""
        if t.num_active == 0:
            empty = SparseTensor2D(np.zeros((0, 2), np.int64), np.zeros((0, t.channels)), t.stride)
            return empty, np.zeros(0, dtype=np.int64)

        keys = pack_coords(t.coords[:, :2])
        unique_keys, inverse = np.unique(keys, return_inverse=True)
        inverse = inverse.reshape(-1)
        sums = SparseEngine.segment_sum(t.feats, inverse, len(unique_keys))
        out = SparseTensor2D(unpack_coords(unique_keys, 2), sums.astype(t.feats.dtype, copy=False), t.stride)
        return out, inverse

    @staticmethod
    def segment_sum(feats: np.ndarray, inverse: np.ndarray, n: int) -> np.ndarray:
        """Row sums grouped by ``inverse``, accumulated in float64 in storage order."""
        sums = np.zeros((n, feats.shape[1]), dtype=np.float64)
        np.add.at(sums, inverse, feats)
        return sums

    @staticmethod
    def height_compress_backward(d_out: np.ndarray, inverse: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the 3D input rows: each input row copies its column's gradient."""
        return d_out[inverse]

    @staticmethod
    def rescale_coords(coords: np.ndarray, factor: int) -> np.ndarray:
        """Floor-divide integer coordinates by ``factor``.

        Raises:
            ValueError: If factor <= 0
        """
        if factor <= 0:
            raise ValueError(f"Rescale factor must be positive, got {factor}")
        return np.floor_divide(np.asarray(coords, dtype=np.int64), factor)

    @staticmethod
    def gather(t: SparseTensor2D, coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Feature rows at ``coords`` in order.

        Returns:
            (feats [len(coords) x C], missing mask); inactive coordinates give zero rows
        """
        rows = t.index.lookup(coords)
        missing = rows < 0
        feats = np.zeros((len(rows), t.channels), dtype=t.feats.dtype)
        feats[~missing] = t.feats[rows[~missing]]
        return feats, missing

    @staticmethod
    def scatter_replace(t: SparseTensor2D, coords: np.ndarray, feats: np.ndarray) -> SparseTensor2D:
        """Overwrite the rows at ``coords`` with ``feats``; every other row is untouched.

        Raises:
            IndexBookkeepingError: If any coordinate is not active in ``t``
        """
        rows = t.index.lookup(coords)
        if np.any(rows < 0):
            bad = np.asarray(coords)[rows < 0][0]
            raise IndexBookkeepingError(
                f"scatter to inactive coordinate {tuple(int(v) for v in bad)} "
                f"({int((rows < 0).sum())} of {len(rows)} coordinates inactive)"
            )
        return SparseEngine.scatter_rows(t, rows, feats)

    @staticmethod
    def scatter_rows(t: SparseTensor2D, rows: np.ndarray, feats: np.ndarray) -> SparseTensor2D:
        """Row-indexed variant of :meth:`scatter_replace`."""
        new_feats = t.feats.copy()
        new_feats[rows] = feats
        return t.with_feats(new_feats)

    @staticmethod
    def to_world_xy(coords: np.ndarray, stride: int, cfg: VoxelGridConfig) -> np.ndarray:
        """Cell-center (x, y) in meters: ``(c + 0.5) * stride * voxel + range_min``."""
        coords = np.asarray(coords, dtype=np.float64)
        scale = stride * np.asarray(cfg.voxel_size[:2])
        return (coords[:, :2] + 0.5) * scale + np.asarray(cfg.range_min[:2])

    @staticmethod
    def to_cell_xy(xy: np.ndarray, stride: int, cfg: VoxelGridConfig) -> np.ndarray:
        """Inverse of :meth:`to_world_xy` in continuous cell units."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        scale = stride * np.asarray(cfg.voxel_size[:2])
        return (xy - np.asarray(cfg.range_min[:2])) / scale - 0.5
