"""Tests for scene generation and the point, box and checkpoint file formats.

Run with: pytest tests/test_scene_io.py
"""

import json
import logging
from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest

from sparsevox.config import preset_config
from sparsevox.engines.detector_engine import DetectorEngine
from sparsevox.engines.eval_engine import EvalEngine
from sparsevox.exceptions import PointFileError, SchemaError
from sparsevox.io.box_io import format_boxes, parse_boxes, read_box_sets, read_boxes, write_boxes
from sparsevox.io.checkpoint import load_checkpoint, save_checkpoint
from sparsevox.io.point_io import read_point_bin, write_point_bin
from sparsevox.io.scene_generate import SceneGenerator, generate_scene
from sparsevox.models.detection import DetectionBox
from sparsevox.models.params import ParamStore
from sparsevox.models.sparse import PointCloud

DESK_SCENE = preset_config("desk").scene


# --- scene generation ---------------------------------------------------------


def test_generation_is_deterministic():
    a = SceneGenerator.generate_scene(DESK_SCENE, 42)
    b = generate_scene(DESK_SCENE, 42)
    c = SceneGenerator.generate_scene(DESK_SCENE, 43)
    np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
    assert a.boxes == b.boxes
    assert a.cloud.source_file == "gen:42"
    assert not np.array_equal(a.cloud.points[:50], c.cloud.points[:50])


def test_generated_points_are_float32_and_in_range():
    sample = SceneGenerator.generate_scene(DESK_SCENE, 1)
    pts = sample.cloud.points
    assert pts.dtype == np.float32
    lo, hi = np.array(DESK_SCENE.point_range[:3]), np.array(DESK_SCENE.point_range[3:])
    assert np.all(pts[:, :3] >= lo) and np.all(pts[:, :3] < hi)
    assert pts[:, 3].min() >= 0.0 and pts[:, 3].max() <= 1.0


def test_every_box_holds_points_and_boxes_do_not_overlap():
    for seed in range(5):
        sample = SceneGenerator.generate_scene(DESK_SCENE, seed)
        assert sample.num_objects == sum(DESK_SCENE.n_objects) - sample.placement_failures
        for box in sample.boxes:
            assert box.contains(sample.cloud.points[:, :3].astype(np.float64)).sum() >= 5
            assert box.bev_range >= DESK_SCENE.min_object_range
        for a, b in combinations(sample.boxes, 2):
            assert EvalEngine.bev_rotated_iou(a, b) == 0.0


def test_every_box_covers_an_active_voxel():
    cfg = preset_config("desk")
    sample = SceneGenerator.generate_scene(cfg.scene, 8)
    plan = DetectorEngine.plan_scene(sample.cloud, cfg)
    assert plan.voxels.num_active > 0
    means = plan.voxels.feats[:, :3]
    for box in sample.boxes:
        assert box.contains(means, margin=0.2).any()


def test_placement_failures_are_counted(caplog):
    crowded = replace(DESK_SCENE, n_objects=(40, 0, 0), point_range=(0.0, -6.0, -3.0, 12.0, 6.0, 1.0),
                      placement_attempts=20)
    with caplog.at_level(logging.WARNING, logger="sparsevox.io.scene_generate"):
        sample = SceneGenerator.generate_scene(crowded, 0)
    assert sample.placement_failures > 0
    assert sample.num_objects + sample.placement_failures == 40
    assert "could not be placed" in caplog.text


def test_scene_without_objects():
    sample = SceneGenerator.generate_scene(replace(DESK_SCENE, n_objects=(0, 0, 0)), 5)
    assert sample.boxes == []
    assert sample.cloud.num_points > 0


def test_parallel_generation_keeps_seed_order():
    seeds = [3, 1, 2]
    serial = SceneGenerator.generate_scenes(DESK_SCENE, seeds, jobs=1)
    parallel = SceneGenerator.generate_scenes(DESK_SCENE, seeds, jobs=3)
    assert [s.seed for s in parallel] == seeds
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)


# --- point files --------------------------------------------------------------


def test_point_file_round_trip_is_byte_exact(tmp_path):
    path = tmp_path / "scene.bin"
    cloud = SceneGenerator.generate_scene(DESK_SCENE, 2).cloud
    write_point_bin(cloud, path)
    back = read_point_bin(path)
    np.testing.assert_array_equal(back.points, cloud.points)
    assert path.stat().st_size == 16 * cloud.num_points
    write_point_bin(back, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_empty_point_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert read_point_bin(path).num_points == 0


def test_truncated_point_file_reports_offset(tmp_path):
    path = tmp_path / "short.bin"
    path.write_bytes(np.zeros(5, dtype="<f4").tobytes())
    with pytest.raises(PointFileError) as info:
        read_point_bin(path)
    assert info.value.byte_offset == 16


def test_non_finite_point_reports_record_offset(tmp_path):
    data = np.zeros((3, 4), dtype="<f4")
    data[2, 1] = np.nan
    path = tmp_path / "nan.bin"
    path.write_bytes(data.tobytes())
    with pytest.raises(PointFileError) as info:
        read_point_bin(path)
    assert info.value.byte_offset == 32


def test_missing_point_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_point_bin(tmp_path / "nope.bin")


def test_write_creates_parent_directories(tmp_path):
    cloud = PointCloud(np.array([[1.0, 2.0, 3.0, 0.5]]))
    write_point_bin(cloud, tmp_path / "sub" / "one.bin")
    assert read_point_bin(tmp_path / "sub" / "one.bin").points.dtype == np.float32


# --- box files ----------------------------------------------------------------


def _boxes():
    return [
        DetectionBox(10.0, 1.0, -0.9, 4.1, 1.8, 1.5, 0.3, 0, 0.9),
        DetectionBox(20.5, -3.25, -0.8, 0.8, 0.7, 1.7, -1.0, 1, 0.4),
    ]


def test_box_file_round_trip(tmp_path):
    path = tmp_path / "dets.json"
    write_boxes(_boxes(), path)
    assert read_boxes(path) == _boxes()
    assert json.loads(path.read_text())[0]["cls"] == 0
    assert format_boxes([]) == "[]\n"
    assert parse_boxes("  [ ]  ") == []


def test_box_file_accepts_any_layout():
    text = json.dumps([b.to_record() for b in _boxes()], indent=4)
    assert parse_boxes(text) == _boxes()


def _bad_second_record(mutate):
    records = [b.to_record() for b in _boxes()]
    mutate(records[1])
    return "[\n" + ",\n".join(json.dumps(r) for r in records) + "\n]\n"


@pytest.mark.parametrize("mutate", [
    lambda r: r.pop("score"),
    lambda r: r.update(extra=1),
    lambda r: r.update(cls=3),
    lambda r: r.update(cls=1.5),
    lambda r: r.update(l="long"),
    lambda r: r.update(w=True),
    lambda r: r.update(h=-1.0),
    lambda r: r.update(score=1.5),
])
def test_schema_errors_point_at_record_line(mutate):
    with pytest.raises(SchemaError) as info:
        parse_boxes(_bad_second_record(mutate), "dets.json")
    assert info.value.line == 3
    assert "dets.json:3" in str(info.value)


def test_malformed_json_reports_line():
    with pytest.raises(SchemaError) as info:
        parse_boxes('[\n{"cx": 1.0,\n "cy": }\n]')
    assert info.value.line == 3
    with pytest.raises(SchemaError) as info:
        parse_boxes('{"cx": 1}')
    assert info.value.line == 1
    with pytest.raises(SchemaError):
        parse_boxes("[]\n[]")


def test_read_box_sets_pairs_directories(tmp_path):
    for sub in ("dets", "gt"):
        write_boxes(_boxes(), tmp_path / sub / "000001.json")
        write_boxes(_boxes()[:1], tmp_path / sub / "000002.json")
    dets, gts = read_box_sets(tmp_path / "dets", tmp_path / "gt")
    assert [len(s) for s in dets] == [2, 1]
    assert gts == dets

    write_boxes([], tmp_path / "gt" / "000003.json")
    with pytest.raises(ValueError):
        read_box_sets(tmp_path / "dets", tmp_path / "gt")


# --- checkpoints ----------------------------------------------------------------


def _params():
    params = ParamStore(seed=9)
    params.add("backbone.stage1.conv1.weight", np.arange(24.0).reshape(2, 3, 4) / 7.0)
    params.add("gfa.head.cls.bias", np.array([-2.19, 0.5, 1e-300]))
    params.add("scalar", np.array(3.5))
    return params


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(_params(), path)
    back = load_checkpoint(path, expected=_params())
    assert list(back) == list(_params())
    for name in back:
        np.testing.assert_array_equal(back[name], _params()[name])
    assert back.seed == 9
    assert path.read_bytes()[:8] == b"SVOXCKPT"


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(_params(), path)
    raw = path.read_bytes()

    (tmp_path / "short.ckpt").write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")

    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(tmp_path / "long.ckpt")

    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "magic.ckpt")

    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_rejects_mismatched_model(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(_params(), path)
    other = ParamStore()
    other.add("backbone.stage1.conv1.weight", np.zeros((2, 3, 5)))
    other.add("gfa.head.cls.bias", np.zeros(3))
    other.add("scalar", np.array(0.0))
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(path, expected=other)
    renamed = ParamStore()
    renamed.add("x", np.zeros(1))
    with pytest.raises(ValueError, match="names"):
        load_checkpoint(path, expected=renamed)
