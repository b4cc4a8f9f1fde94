"""Detection / ground-truth exchange files.

A file is a JSON array of box records with exactly the fields
``cx, cy, cz, l, w, h, yaw, cls, score``. Writers put one record per line so
schema errors can point at a line; readers accept any JSON layout.
"""

import json
import logging
from pathlib import Path
from typing import Any, List, Sequence, Tuple, Union

from sparsevox.exceptions import SchemaError
from sparsevox.models.detection import BOX_FIELDS, DetectionBox
from sparsevox.models.scene import NUM_CLASSES

logger = logging.getLogger(__name__)

_decoder = json.JSONDecoder()


def _line_of(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def _skip_ws(text: str, pos: int) -> int:
    while pos < len(text) and text[pos] in " \t\r\n":
        pos += 1
    return pos


def _record_to_box(record: Any, path: str, line: int) -> DetectionBox:
    if not isinstance(record, dict):
        raise SchemaError(f"box record must be an object, got {type(record).__name__}", path, line)
    keys = set(record)
    missing = [f for f in BOX_FIELDS if f not in keys]
    extra = sorted(keys - set(BOX_FIELDS))
    if missing:
        raise SchemaError(f"missing field(s) {missing}", path, line)
    if extra:
        raise SchemaError(f"unknown field(s) {extra}", path, line)
    for name in BOX_FIELDS:
        value = record[name]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"field '{name}' must be a number", path, line)
    if not isinstance(record["cls"], int) or not 0 <= record["cls"] < NUM_CLASSES:
        raise SchemaError(f"field 'cls' must be an integer in [0, {NUM_CLASSES})", path, line)
    try:
        return DetectionBox(**{name: record[name] for name in BOX_FIELDS})
    except ValueError as e:
        raise SchemaError(str(e), path, line) from e


def parse_boxes(text: str, path: str = "<string>") -> List[DetectionBox]:
    """Parse a box array, reporting the line of the first offending record.

    Raises:
        SchemaError: On malformed JSON or any record violating the schema
    """
    pos = _skip_ws(text, 0)
    if pos >= len(text) or text[pos] != "[":
        raise SchemaError("expected a JSON array of box records", path, _line_of(text, pos))
    pos = _skip_ws(text, pos + 1)
    boxes: List[DetectionBox] = []
    if pos < len(text) and text[pos] == "]":
        pos += 1
    else:
        while True:
            line = _line_of(text, pos)
            try:
                record, pos = _decoder.raw_decode(text, pos)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e.msg}", path, e.lineno) from e
            boxes.append(_record_to_box(record, path, line))
            pos = _skip_ws(text, pos)
            if pos < len(text) and text[pos] == ",":
                pos = _skip_ws(text, pos + 1)
                continue
            if pos < len(text) and text[pos] == "]":
                pos += 1
                break
            raise SchemaError("expected ',' or ']' after box record", path, _line_of(text, pos))
    if _skip_ws(text, pos) != len(text):
        raise SchemaError("trailing content after the box array", path, _line_of(text, pos))
    return boxes


def read_boxes(path: Union[str, Path]) -> List[DetectionBox]:
    """Read a detection or GT file.

    Raises:
        FileNotFoundError: If the file doesn't exist
        SchemaError: If the content violates the schema
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Box file not found: {path}")
    boxes = parse_boxes(path.read_text(encoding="utf-8"), str(path))
    logger.debug("Read %d boxes from %s", len(boxes), path)
    return boxes


def format_boxes(boxes: Sequence[DetectionBox]) -> str:
    """Canonical text: one record per line, fields in schema order."""
    if not boxes:
        return "[]\n"
    lines = [json.dumps(b.to_record()) for b in boxes]
    return "[\n" + ",\n".join("  " + line for line in lines) + "\n]\n"


def write_boxes(boxes: Sequence[DetectionBox], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_boxes(boxes), encoding="utf-8")


def read_box_sets(dets: Union[str, Path], gts: Union[str, Path]
                  ) -> Tuple[List[List[DetectionBox]], List[List[DetectionBox]]]:
    """Pair detection and GT files, or same-named ``*.json`` files of two directories.

    Raises:
        ValueError: If the two directories hold different file names
    """
    dets, gts = Path(dets), Path(gts)
    if dets.is_dir() and gts.is_dir():
        det_names = sorted(p.name for p in dets.glob("*.json"))
        gt_names = sorted(p.name for p in gts.glob("*.json"))
        if det_names != gt_names:
            raise ValueError(f"Detection files {det_names} do not match GT files {gt_names}")
        return ([read_boxes(dets / n) for n in det_names], [read_boxes(gts / n) for n in gt_names])
    return [read_boxes(dets)], [read_boxes(gts)]
