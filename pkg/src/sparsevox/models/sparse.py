"""Sparse tensor data models for sparsevox.

This module defines the point cloud container and the sparse voxel tensors
that flow through the whole detection pipeline: an integer coordinate list,
a feature row per active site, the feature stride, and an exact
coordinate-to-row index.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

VALID_STRIDES = (1, 2, 4, 8, 16, 32)

# Coordinates are packed into one int64 key, 21 bits per axis.
_AXIS_BITS = 21
_AXIS_OFFSET = 1 << (_AXIS_BITS - 1)
_AXIS_MASK = (1 << _AXIS_BITS) - 1


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack integer (ix, iy[, iz]) rows into unique int64 keys.

    Lexicographic order of the coordinates equals numeric order of the keys.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] not in (2, 3):
        raise ValueError(f"Expected an (N, 2) or (N, 3) coordinate array, got {coords.shape}")
    if coords.size and (coords.min() < -_AXIS_OFFSET or coords.max() >= _AXIS_OFFSET):
        raise ValueError("Coordinate outside the packable range of +/- 2^20")

    shifted = coords + _AXIS_OFFSET
    keys = shifted[:, 0].copy()
    for axis in range(1, coords.shape[1]):
        keys = (keys << _AXIS_BITS) | shifted[:, axis]
    return keys


def unpack_coords(keys: np.ndarray, ndim: int) -> np.ndarray:
    """Inverse of :func:`pack_coords`."""
    keys = np.asarray(keys, dtype=np.int64)
    coords = np.empty((len(keys), ndim), dtype=np.int64)
    for axis in range(ndim - 1, -1, -1):
        coords[:, axis] = (keys & _AXIS_MASK) - _AXIS_OFFSET
        keys = keys >> _AXIS_BITS
    return coords


class CoordIndex:
    """Exact coordinate -> row map.

    Keys are kept sorted so that batched lookups run through
    ``np.searchsorted``; there is no probabilistic structure involved.
    """

    def __init__(self, coords: np.ndarray):
        keys = pack_coords(coords) if len(coords) else np.empty(0, dtype=np.int64)
        order = np.argsort(keys, kind="stable")
        self._keys = keys[order]
        self._rows = order.astype(np.int64)
        if len(self._keys) > 1 and np.any(self._keys[1:] == self._keys[:-1]):
            raise ValueError("Sparse tensor coordinates must be unique")

    def __len__(self) -> int:
        return len(self._keys)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Rows of ``coords`` in the tensor, -1 where a coordinate is inactive."""
        coords = np.asarray(coords, dtype=np.int64)
        if len(coords) == 0 or len(self._keys) == 0:
            return np.full(len(coords), -1, dtype=np.int64)
        keys = pack_coords(coords)
        pos = np.searchsorted(self._keys, keys)
        pos_clipped = np.minimum(pos, len(self._keys) - 1)
        found = self._keys[pos_clipped] == keys
        return np.where(found, self._rows[pos_clipped], -1)

    def __contains__(self, coord) -> bool:
        return bool(self.lookup(np.asarray([coord]))[0] >= 0)

    def __getitem__(self, coord) -> int:
        row = int(self.lookup(np.asarray([coord]))[0])
        if row < 0:
            raise KeyError(tuple(coord))
        return row


@dataclass
class PointCloud:
    """Raw LiDAR sweep.

    ``points`` is an Nx4 array of (x, y, z, intensity); x/y/z in meters,
    intensity unitless in [0, 1].
    """

    points: np.ndarray
    source_file: Optional[str] = None

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.size == 0:
            self.points = np.zeros((0, 4), dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise ValueError(f"Point cloud must be Nx4, got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("Point cloud contains non-finite values")
        intensity = self.points[:, 3]
        if intensity.size and (intensity.min() < 0.0 or intensity.max() > 1.0):
            raise ValueError("Point intensity must lie in [0, 1]")

    @property
    def num_points(self) -> int:
        """Number of points."""
        return len(self.points)

    @property
    def bounds(self) -> Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]:
        """Bounding box as ((x_min, x_max), (y_min, y_max), (z_min, z_max))."""
        if len(self.points) == 0:
            return ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0))
        mins = self.points[:, :3].min(axis=0)
        maxs = self.points[:, :3].max(axis=0)
        return tuple((float(lo), float(hi)) for lo, hi in zip(mins, maxs))


@dataclass
class _SparseTensor:
    coords: np.ndarray
    feats: np.ndarray
    stride: int = 1
    _index: Optional[CoordIndex] = field(default=None, repr=False, compare=False)

    NDIM = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, self.NDIM)
        self.feats = np.asarray(self.feats)
        if self.feats.ndim == 1:
            self.feats = self.feats.reshape(len(self.coords), -1)
        if self.feats.ndim != 2:
            raise ValueError(f"Features must be a matrix, got shape {self.feats.shape}")
        if len(self.coords) != len(self.feats):
            raise ValueError(
                f"{len(self.coords)} coordinates but {len(self.feats)} feature rows"
            )
        if self.stride not in VALID_STRIDES:
            raise ValueError(f"Stride must be one of {VALID_STRIDES}, got {self.stride}")

    @property
    def index(self) -> CoordIndex:
        """Coordinate -> row map, built on first use."""
        if self._index is None:
            self._index = CoordIndex(self.coords)
        return self._index

    @property
    def num_active(self) -> int:
        """Number of active sites."""
        return len(self.coords)

    @property
    def channels(self) -> int:
        """Feature width C."""
        return self.feats.shape[1]

    def with_feats(self, feats: np.ndarray):
        """Same active set and index, new features."""
        return type(self)(coords=self.coords, feats=feats, stride=self.stride, _index=self._index)

    def dense(self, shape: Tuple[int, ...]) -> np.ndarray:
        """Dense grid of shape ``shape + (C,)`` (coords must be non-negative and in bounds)."""
        grid = np.zeros(tuple(shape) + (self.channels,), dtype=self.feats.dtype)
        grid[tuple(self.coords.T)] = self.feats
        return grid


@dataclass
class SparseTensor3D(_SparseTensor):
    """Sparse 3D voxel features F_s at a given stride (coords are (ix, iy, iz))."""

    NDIM = 3

    def __post_init__(self):
        super().__post_init__()
        _ = self.index  # uniqueness is checked here


@dataclass
class SparseTensor2D(_SparseTensor):
    """Sparse BEV features (coords are (ix, iy))."""

    NDIM = 2

    def __post_init__(self):
        super().__post_init__()
        _ = self.index
