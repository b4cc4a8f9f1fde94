"""Binary parameter checkpoints.

Layout (little endian)::

    b"SVOXCKPT" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 ndim | ndim x u32 dims
    all tensors as <f8, in table order
"""

import logging
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from sparsevox.models.params import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"SVOXCKPT"
VERSION = 1


def save_checkpoint(params: ParamStore, path: Union[str, Path]) -> None:
    """Write every parameter in canonical order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in params:
        encoded = name.encode("utf-8")
        shape = params[name].shape
        header.append(struct.pack("<H", len(encoded)) + encoded)
        header.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
    data = [np.ascontiguousarray(params[name], dtype="<f8").tobytes() for name in params]
    path.write_bytes(b"".join(header + data))
    logger.debug("Saved %d tensors to %s", len(params), path)


def load_checkpoint(path: Union[str, Path], expected: Optional[ParamStore] = None) -> ParamStore:
    """Read a checkpoint, optionally checking names and shapes against ``expected``.

    Raises:
        FileNotFoundError: If the file doesn't exist
        ValueError: If the file is truncated, has a bad magic or version, or
            does not match ``expected``
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise ValueError(f"{path}: truncated checkpoint at byte {offset}")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: not a sparsevox checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")

    table = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        table.append((name, shape))

    store = ParamStore()
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        store.add(name, np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64))
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after tensor data")

    if expected is not None:
        if list(store) != list(expected):
            raise ValueError(f"{path}: parameter names do not match the configured model")
        for name in store:
            if store[name].shape != expected[name].shape:
                raise ValueError(
                    f"{path}: '{name}' has shape {store[name].shape}, model expects {expected[name].shape}"
                )
        store.seed = expected.seed
    return store
