"""Exception types raised across sparsevox.

Data problems subclass ``ValueError`` so callers that only care about
"bad input" can catch one type; numeric breakdowns subclass
``FloatingPointError``.
"""

from typing import Optional


class ConfigError(ValueError):
    """Unknown key, type mismatch or out-of-range value in a pipeline config."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class PointFileError(ValueError):
    """Malformed ``.bin`` point file."""

    def __init__(self, message: str, path: str, byte_offset: int):
        self.path = path
        self.byte_offset = byte_offset
        super().__init__(f"{path}: {message} (byte offset {byte_offset})")


class SchemaError(ValueError):
    """Detection/GT JSON that violates the box record schema."""

    def __init__(self, message: str, path: str = "<string>", line: Optional[int] = None):
        self.path = path
        self.line = line
        loc = f"{path}:{line}" if line is not None else path
        super().__init__(f"{loc}: {message}")


class IndexBookkeepingError(ValueError):
    """Write addressed to a coordinate that is not active in the target tensor."""


class NumericError(FloatingPointError):
    """NaN/inf gradients or losses, or a failed gradient check."""
