"""Flat ``section.field = value`` config file loader.

Example::

    # desk run with a wider key budget
    seed = 7
    lmfa.n_key = 128
    voxel.voxel_size = 0.1, 0.1, 0.2
    gfa.mask_padded = false
    scene.size_mean = 4.2, 1.8, 1.6; 0.8, 0.7, 1.75; 1.8, 0.6, 1.7

Values are typed by the preset's current value for the same key: booleans
are ``true``/``false``, tuples are comma separated and keep their length,
nested tuples separate rows with ``;``.
"""

import logging
from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from sparsevox.config.pipeline import PipelineConfig, preset_config
from sparsevox.exceptions import ConfigError

logger = logging.getLogger(__name__)

_TOP_LEVEL = ("seed",)


def load_config(path: Optional[Union[str, Path]] = None, preset: str = "desk") -> PipelineConfig:
    """Load a config file merged over a named preset.

    Args:
        path: Config file, or None for the bare preset
        preset: ``desk``, ``kitti`` or ``nuscenes``

    Returns:
        Validated PipelineConfig

    Raises:
        FileNotFoundError: If the file doesn't exist
        ConfigError: On unknown keys, type mismatches or out-of-range values
    """
    try:
        base = preset_config(preset)
    except ValueError as e:
        raise ConfigError(str(e), key="preset") from e
    if path is None:
        return base

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), base)


def parse_config_text(text: str, base: PipelineConfig) -> PipelineConfig:
    """Apply ``key = value`` lines in ``text`` on top of ``base``."""
    sections = base.sections
    updates: Dict[str, Dict[str, object]] = {}
    top: Dict[str, object] = {}
    origin: Dict[str, int] = {}

    for line_num, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=line_num)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in origin:
            raise ConfigError("key given twice", key=key, line=line_num)
        origin[key] = line_num

        if key in _TOP_LEVEL:
            top[key] = _coerce(value, getattr(base, key), key, line_num)
            continue

        section_name, _, field_name = key.partition(".")
        section = sections.get(section_name)
        if section is None or field_name not in {f.name for f in fields(section)}:
            raise ConfigError("unknown key", key=key, line=line_num)
        current = getattr(section, field_name)
        updates.setdefault(section_name, {})[field_name] = _coerce(value, current, key, line_num)

    merged = {}
    for section_name, changes in updates.items():
        try:
            merged[section_name] = replace(sections[section_name], **changes)
        except ValueError as e:
            keys = sorted(f"{section_name}.{name}" for name in changes)
            first_line = min(origin[k] for k in keys)
            raise ConfigError(f"out of range: {e}", key=", ".join(keys), line=first_line) from e

    try:
        cfg = replace(base, **merged, **top)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    logger.debug("Loaded config over preset %s with %d overrides", base.preset, len(origin))
    return cfg


def _coerce(text: str, current: object, key: str, line: int) -> object:
    """Parse ``text`` into the type of ``current``."""
    try:
        if isinstance(current, bool):
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError(f"expected true or false, got '{text}'")
            return lowered == "true"
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, str):
            return text.strip("\"'")
        if isinstance(current, tuple):
            if current and isinstance(current[0], tuple):
                rows = [r.strip() for r in text.split(";")]
                if len(rows) != len(current):
                    raise ValueError(f"expected {len(current)} ';'-separated rows")
                return tuple(_coerce_flat(r, current[0]) for r in rows)
            return _coerce_flat(text, current)
    except ValueError as e:
        raise ConfigError(f"type mismatch: {e}", key=key, line=line) from e
    raise ConfigError(f"unsupported value type {type(current).__name__}", key=key, line=line)


def _coerce_flat(text: str, current: Tuple) -> Tuple:
    parts: List[str] = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) != len(current):
        raise ValueError(f"expected {len(current)} comma-separated values, got {len(parts)}")
    kind = int if all(isinstance(v, int) and not isinstance(v, bool) for v in current) else float
    return tuple(kind(p) for p in parts)
