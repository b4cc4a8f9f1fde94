"""Tests for the composed detector: planning, frozen replay, inference and post-processing."""

from dataclasses import replace

import numpy as np

from sparsevox.engines.detector_engine import DetectorEngine
from sparsevox.models.detection import STAGE_NAMES, DetectionBox
from sparsevox.models.sparse import PointCloud


def test_plan_records_all_scales(small_cfg, small_scene):
    plan = DetectorEngine.plan_scene(small_scene.cloud, small_cfg)
    assert plan.voxels.num_active > 0
    assert plan.num_bev_sites == len(np.unique(plan.fused_coords, axis=0))
    fused = {tuple(c) for c in plan.fused_coords}
    assert {tuple(c) for c in plan.scale_coords[4]} <= fused
    assert {tuple(2 * c) for c in plan.scale_coords[5]} <= fused
    assert {tuple(4 * c) for c in plan.scale_coords[6]} <= fused


def test_forward_shapes(small_cfg, small_scene):
    plan = DetectorEngine.plan_scene(small_scene.cloud, small_cfg)
    out = DetectorEngine.forward(plan, DetectorEngine.init_params(small_cfg), small_cfg)
    n_q = out.gfa.queries.num_queries
    assert n_q == min(small_cfg.gfa.n_query, plan.num_bev_sites)
    assert out.cls_logits.shape == (n_q, 3)
    assert out.reg.shape == (n_q, 8)
    assert out.lmfa.heatmap.logits.shape == (plan.num_bev_sites, 3)
    assert out.lmfa.keys.num_keys == min(small_cfg.lmfa.n_key, plan.num_bev_sites)


def test_frozen_replay_reproduces_outputs(small_cfg, small_scene):
    plan = DetectorEngine.plan_scene(small_scene.cloud, small_cfg)
    params = DetectorEngine.init_params(small_cfg)
    first = DetectorEngine.forward(plan, params, small_cfg)
    replay = DetectorEngine.forward(plan, params, small_cfg, first.frozen)
    np.testing.assert_array_equal(replay.cls_logits, first.cls_logits)
    np.testing.assert_array_equal(replay.reg, first.reg)
    np.testing.assert_array_equal(replay.lmfa.heatmap.logits, first.lmfa.heatmap.logits)


def test_backward_fills_every_gradient(small_cfg, small_scene):
    plan = DetectorEngine.plan_scene(small_scene.cloud, small_cfg)
    params = DetectorEngine.init_params(small_cfg)
    out = DetectorEngine.forward(plan, params, small_cfg)
    rng = np.random.default_rng(0)
    DetectorEngine.backward(out, params, rng.standard_normal(out.lmfa.heatmap.logits.shape),
                            rng.standard_normal(out.cls_logits.shape), rng.standard_normal(out.reg.shape))
    touched = [name for name in params if np.any(params.grads[name] != 0)]
    assert any(n.startswith("backbone.") for n in touched)
    assert any(n.startswith("lmfa.") for n in touched)
    assert "gfa.head.cls.weight" in touched
    assert "gfa.sasa.eta.weight" in touched


def test_infer_is_deterministic_and_reports_stages(small_cfg, small_scene):
    params = DetectorEngine.init_params(small_cfg)
    boxes, report = DetectorEngine.infer(small_scene.cloud, params, small_cfg)
    again, _ = DetectorEngine.infer(small_scene.cloud, params, small_cfg)

    assert boxes == again
    assert list(report.stage_ms) == list(STAGE_NAMES)
    assert all(ms >= 0 for ms in report.stage_ms.values())
    assert report.detection_count == len(boxes)
    assert report.num_parameters == params.num_parameters
    assert report.peak_memory_bytes > 0
    assert report.active_sites["s1"] == report.active_sites["voxels"]
    assert [b.score for b in boxes] == sorted((b.score for b in boxes), reverse=True)


def test_infer_on_empty_cloud(small_cfg):
    boxes, report = DetectorEngine.infer(PointCloud(np.zeros((0, 4))), DetectorEngine.init_params(small_cfg),
                                         small_cfg)
    assert boxes == []
    assert report.active_sites["voxels"] == 0


def test_postprocess_threshold_and_nms(small_cfg):
    boxes = [
        DetectionBox(10.0, 0.0, -0.9, 4.0, 1.8, 1.5, 0.0, 0, 0.9),
        DetectionBox(10.3, 0.0, -0.9, 4.0, 1.8, 1.5, 0.0, 0, 0.6),
        DetectionBox(20.0, 0.0, -0.9, 4.0, 1.8, 1.5, 0.0, 0, 0.05),
    ]
    cfg = replace(small_cfg, post=replace(small_cfg.post, score_threshold=0.1))
    assert [b.score for b in DetectorEngine.postprocess(boxes, cfg)] == [0.9]
    assert [b.score for b in DetectorEngine.postprocess(boxes, cfg, nms=False)] == [0.9, 0.6]
