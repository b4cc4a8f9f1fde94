"""KITTI-style ``.bin`` point files: little-endian float32 (x, y, z, intensity) rows."""

import logging
from pathlib import Path
from typing import Union

import numpy as np

from sparsevox.exceptions import PointFileError
from sparsevox.models.sparse import PointCloud

logger = logging.getLogger(__name__)

POINT_DTYPE = np.dtype("<f4")
RECORD_BYTES = 4 * POINT_DTYPE.itemsize


def read_point_bin(path: Union[str, Path]) -> PointCloud:
    """Read a ``.bin`` point file.

    Args:
        path: File of N x 16-byte records

    Returns:
        PointCloud with float32 points; an empty file gives an empty cloud

    Raises:
        FileNotFoundError: If the file doesn't exist
        PointFileError: If the length is not a multiple of 16 bytes or the
            values are invalid (non-finite, intensity outside [0, 1])
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Point file not found: {path}")

    raw = path.read_bytes()
    if len(raw) % RECORD_BYTES != 0:
        whole = len(raw) - len(raw) % RECORD_BYTES
        raise PointFileError(
            f"length {len(raw)} is not a multiple of {RECORD_BYTES}; trailing partial record",
            str(path),
            whole,
        )
    points = np.frombuffer(raw, dtype=POINT_DTYPE).reshape(-1, 4)

    bad = ~np.all(np.isfinite(points), axis=1) | (points[:, 3] < 0) | (points[:, 3] > 1)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise PointFileError("non-finite value or intensity outside [0, 1]", str(path), row * RECORD_BYTES)

    logger.debug("Read %d points from %s", len(points), path)
    return PointCloud(points.copy(), source_file=str(path))


def write_point_bin(pc: PointCloud, path: Union[str, Path]) -> None:
    """Write ``pc`` as float32 records; reading the file back is byte exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(pc.points, dtype=POINT_DTYPE).tobytes())
