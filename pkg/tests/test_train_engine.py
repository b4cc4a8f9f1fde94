"""Tests for target assignment, losses, gradient checking and the toy training loop.

Run with: pytest tests/test_train_engine.py
Set SPARSEVOX_RUN_SLOW=1 to include the overfit run.
"""

import csv
import math
import warnings

import numpy as np
import pytest

from sparsevox.config import preset_config
from sparsevox.engines.detector_engine import DetectorEngine
from sparsevox.engines.eval_engine import EvalEngine
from sparsevox.engines.sparse_engine import SparseEngine
from sparsevox.engines.train_engine import OptimizerState, TrainEngine, gaussian_radius
from sparsevox.exceptions import NumericError
from sparsevox.io.scene_generate import SceneGenerator
from sparsevox.models.detection import DetectionBox
from sparsevox.models.params import ParamStore

DESK = preset_config("desk")


def _box_at_cell(cell, cls=0, size=(4.2, 1.8, 1.6), yaw=0.0):
    x, y = SparseEngine.to_world_xy(np.array([cell], dtype=np.float64), 8, DESK.voxel)[0]
    return DetectionBox(cx=x, cy=y, cz=-0.9, l=size[0], w=size[1], h=size[2], yaw=yaw, cls=cls)


def test_gaussian_radius_value():
    """For a 10x10 cell footprint the third (inner box) case binds."""
    assert gaussian_radius(10.0, 10.0, 0.1) == pytest.approx((-4.0 + math.sqrt(160.0)) / 2.0)
    assert gaussian_radius(20.0, 20.0) > gaussian_radius(10.0, 10.0)


def test_object_radius_has_floor():
    assert TrainEngine.object_radius(_box_at_cell((5, 5)), DESK) == DESK.train.min_radius


def test_heatmap_targets_gaussian_around_nearest_site():
    coords = np.array([[10, 10], [11, 10], [10, 12], [20, 20]])
    tmap = TrainEngine.assign_heatmap_targets([_box_at_cell((10, 10), cls=1)], coords, DESK)

    sigma = 5.0 / 6.0
    expected = [1.0, math.exp(-1.0 / (2 * sigma ** 2)), math.exp(-4.0 / (2 * sigma ** 2)), 0.0]
    np.testing.assert_allclose(tmap.targets[:, 1], expected)
    np.testing.assert_array_equal(tmap.targets[:, [0, 2]], 0.0)
    np.testing.assert_array_equal(tmap.positive_rows, [0])
    assert tmap.num_positives == 1
    assert tmap.skipped == 0


def test_heatmap_targets_overlap_takes_max():
    coords = np.array([[10, 10], [11, 10], [12, 10]])
    gts = [_box_at_cell((10, 10)), _box_at_cell((12, 10))]
    tmap = TrainEngine.assign_heatmap_targets(gts, coords, DESK)
    assert tmap.num_positives == 2
    sigma = 5.0 / 6.0
    assert tmap.targets[1, 0] == pytest.approx(math.exp(-1.0 / (2 * sigma ** 2)))


def test_heatmap_target_skipped_when_no_site_within_radius():
    tmap = TrainEngine.assign_heatmap_targets([_box_at_cell((10, 10))], np.array([[20, 20]]), DESK)
    assert tmap.skipped == 1
    assert tmap.num_positives == 0
    np.testing.assert_array_equal(tmap.targets, 0.0)


def test_heatmap_target_skipped_outside_range():
    gt = DetectionBox(cx=-5.0, cy=0.0, cz=-0.9, l=4.0, w=1.8, h=1.5)
    tmap = TrainEngine.assign_heatmap_targets([gt], np.array([[0, 16]]), DESK)
    assert tmap.skipped == 1


def _focal_inputs(seed=0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, size=(20, 3))
    t = rng.uniform(0.0, 0.9, size=(20, 3))
    t[[1, 7, 13], [0, 2, 1]] = 1.0
    return p, t


def test_focal_loss_gradient_matches_finite_differences():
    p, t = _focal_inputs()
    _, grad = TrainEngine.focal_loss(p, t)
    h = 1e-6
    for idx in [(0, 0), (1, 0), (7, 2), (19, 1)]:
        plus, minus = p.copy(), p.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric = (TrainEngine.focal_loss(plus, t)[0] - TrainEngine.focal_loss(minus, t)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_focal_loss_logit_gradient_matches_finite_differences():
    p, t = _focal_inputs(1)
    z = np.log(p / (1 - p))
    _, grad = TrainEngine.focal_loss_from_logits(z, t)
    h = 1e-6
    for idx in [(1, 0), (2, 2), (7, 2), (13, 1)]:
        plus, minus = z.copy(), z.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric = (TrainEngine.focal_loss_from_logits(plus, t)[0]
                   - TrainEngine.focal_loss_from_logits(minus, t)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_focal_loss_without_positives_normalizes_by_one():
    p = np.array([[0.2, 0.4]])
    t = np.array([[0.0, 0.5]])
    loss, _ = TrainEngine.focal_loss(p, t)
    expected = -(0.2 ** 2 * math.log(0.8) + 0.5 ** 4 * 0.4 ** 2 * math.log(0.6))
    assert loss == pytest.approx(expected)


def test_focal_loss_single_positive_at_half():
    loss, _ = TrainEngine.focal_loss(np.array([[0.5]]), np.array([[1.0]]))
    assert loss == pytest.approx(0.25 * math.log(2.0))
    assert loss == pytest.approx(0.1733, abs=1e-4)


def test_focal_loss_from_extreme_logits_is_quiet():
    z = np.array([[-800.0, 800.0, -50.0]])
    t = np.array([[0.0, 1.0, 0.3]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        loss, grad = TrainEngine.focal_loss_from_logits(z, t)
    assert math.isfinite(loss)
    assert np.all(np.isfinite(grad))


def test_focal_loss_shape_mismatch():
    with pytest.raises(ValueError):
        TrainEngine.focal_loss(np.zeros((2, 3)), np.zeros((3, 2)))


def test_smooth_l1_values():
    target = np.zeros((2, 8))
    pred = np.zeros((2, 8))
    pred[0, 0] = 1.0
    pred[1, 3] = 0.5
    loss, grad = TrainEngine.box_regression_loss(pred, target)
    assert loss == pytest.approx((0.5 + 0.125) / 2)
    assert grad[0, 0] == pytest.approx(0.5)
    assert grad[1, 3] == pytest.approx(0.25)
    assert TrainEngine.box_regression_loss(np.zeros((0, 8)), np.zeros((0, 8)))[0] == 0.0


def test_match_queries_within_radius():
    gts = [_box_at_cell((11, 11)), _box_at_cell((40, 5))]
    pos = np.array([[10, 10], [30, 30], [40, 6]])
    np.testing.assert_array_equal(TrainEngine.match_queries(pos, gts, DESK), [0, -1, 1])
    np.testing.assert_array_equal(TrainEngine.match_queries(pos, [], DESK), [-1, -1, -1])


def test_regression_targets_encode_box():
    gt = _box_at_cell((10, 10), yaw=0.3)
    pos = np.array([[10, 10]])
    target = TrainEngine.regression_targets(pos, [gt], np.array([0]), DESK)[0]
    np.testing.assert_allclose(target[:2], 0.0, atol=1e-9)
    assert target[2] == pytest.approx(-0.9)
    np.testing.assert_allclose(target[3:6], np.log([4.2, 1.8, 1.6]))
    np.testing.assert_allclose(target[6:8], [math.sin(0.3), math.cos(0.3)])


def _tanh_layer():
    params = ParamStore()
    params.add("w", np.random.default_rng(0).standard_normal((3, 4)))
    x = np.array([0.3, -1.2, 0.8, 0.1])

    def forward(p):
        return np.tanh(p["w"] @ x)

    return params, x, forward


def test_grad_check_accepts_correct_gradient():
    params, x, forward = _tanh_layer()

    def backward(p, d):
        dz = d * (1 - np.tanh(p["w"] @ x) ** 2)
        p.accumulate("w", np.outer(dz, x))

    result = TrainEngine.grad_check(forward, backward, params, ["w"], probes=12)
    assert result.max_rel_error < 1e-6
    assert result.probes == 12


def test_grad_check_flags_wrong_gradient():
    params, x, forward = _tanh_layer()

    def backward(p, d):
        dz = d * (1 - np.tanh(p["w"] @ x) ** 2)
        p.accumulate("w", 2.0 * np.outer(dz, x))

    result = TrainEngine.grad_check(forward, backward, params, ["w"], probes=12)
    assert result.max_rel_error > 0.1
    assert result.worst_param.startswith("w[")


def test_grad_check_redraws_scalars_on_relu_kink():
    params = ParamStore()
    params.add("a", np.array([0.0, 0.0, 0.0, 0.7]))

    def forward(p):
        return np.maximum(p["a"], 0.0)

    def backward(p, d):
        p.accumulate("a", d * (p["a"] > 0))

    result = TrainEngine.grad_check(forward, backward, params, ["a"], probes=8, seed=1)
    assert result.skipped >= 1
    assert result.max_rel_error < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_desk_bias_gradients_at_fresh_init(seed):
    """Freshly initialized biases put no ReLU exactly on its kink."""
    sample = SceneGenerator.generate_scene(DESK.scene, seed)
    plan = DetectorEngine.plan_scene(sample.cloud, DESK)
    params = DetectorEngine.init_params(DESK, seed)
    biases = [n for n in params if n.endswith(".bias")]
    result = TrainEngine.detector_gradcheck(plan, params, DESK, probes=len(biases), seed=seed, names=biases)
    assert result.max_rel_error < 1e-4, result.worst_param


def test_module_param_names_partition():
    params = DetectorEngine.init_params(DESK)
    groups = [TrainEngine.module_param_names(params, m) for m in ("backbone", "lmfa", "gfa", "heads")]
    flat = [n for g in groups for n in g]
    assert sorted(flat) == sorted(params)
    assert len(flat) == len(set(flat))
    with pytest.raises(ValueError):
        TrainEngine.module_param_names(params, "stem")


@pytest.mark.parametrize("module", ["backbone", "lmfa", "gfa", "heads"])
def test_detector_gradients_match_finite_differences(small_cfg, small_scene, module):
    plan = DetectorEngine.plan_scene(small_scene.cloud, small_cfg)
    params = DetectorEngine.init_params(small_cfg)
    result = TrainEngine.detector_gradcheck(plan, params, small_cfg, module, probes=12, seed=5)
    assert result.max_rel_error < 1e-4, result.worst_param


def test_compute_losses_shapes(small_cfg, small_scene):
    plan = DetectorEngine.plan_scene(small_scene.cloud, small_cfg)
    out = DetectorEngine.forward(plan, DetectorEngine.init_params(small_cfg), small_cfg)
    breakdown, d_hm, d_cls, d_reg = TrainEngine.compute_losses(out, small_scene.boxes, small_cfg)
    assert d_hm.shape == out.lmfa.heatmap.logits.shape
    assert d_cls.shape == out.cls_logits.shape
    assert d_reg.shape == out.reg.shape
    assert breakdown.positives >= 1
    assert math.isfinite(breakdown.total)
    assert breakdown.total == pytest.approx(breakdown.heatmap_loss + breakdown.reg_weight * breakdown.reg_loss)


def _store(values):
    params = ParamStore()
    params.add("a", np.zeros(len(values)))
    params.grads["a"][:] = values
    return params


def test_adam_first_step_moves_by_lr_sign():
    params = _store([0.5, -2.0, 1e-3])
    TrainEngine.optimizer_step(params, 0.01, "adam", OptimizerState())
    np.testing.assert_allclose(params["a"], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_sgd_step():
    params = _store([0.5, -2.0])
    TrainEngine.optimizer_step(params, 0.1, "sgd")
    np.testing.assert_allclose(params["a"], [-0.05, 0.2])


def test_nan_gradient_names_parameter():
    params = _store([0.5, np.nan])
    with pytest.raises(NumericError, match="'a'"):
        TrainEngine.optimizer_step(params, 0.1)
    with pytest.raises(ValueError):
        TrainEngine.optimizer_step(_store([1.0]), 0.1, "rmsprop")


def test_clip_gradients_to_global_norm():
    params = _store([3.0, 4.0])
    assert TrainEngine.clip_gradients(params, 1.0) == pytest.approx(5.0)
    assert params.global_grad_norm() == pytest.approx(1.0)
    params = _store([0.3, 0.4])
    TrainEngine.clip_gradients(params, 1.0)
    np.testing.assert_allclose(params.grads["a"], [0.3, 0.4])


def test_train_zero_steps_returns_initial_parameters(small_cfg, small_scene, tmp_path):
    result = TrainEngine.train_toy([small_scene], small_cfg, steps=0, seed=4, csv_path=tmp_path / "loss.csv")
    init = DetectorEngine.init_params(small_cfg, 4)
    assert result.history == []
    for name in init:
        np.testing.assert_array_equal(result.params[name], init[name])
    with open(tmp_path / "loss.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0][:2] == ["step", "total"]
    assert len(rows) == 1


def test_train_few_steps_writes_one_row_per_step(small_cfg, small_scene, tmp_path):
    path = tmp_path / "loss.csv"
    result = TrainEngine.train_toy([small_scene], small_cfg, steps=3, csv_path=path)
    assert len(result.history) == 3
    assert all(math.isfinite(row.total) for row in result.history)
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert [r["step"] for r in rows] == ["1", "2", "3"]
    assert float(rows[0]["total"]) == pytest.approx(result.initial_loss, rel=1e-8)


@pytest.mark.slow
def test_overfit_five_scenes():
    """Five desk scenes, 300 Adam steps: the loss collapses and the scenes are recovered."""
    cfg = preset_config("desk")
    scenes = SceneGenerator.generate_scenes(cfg.scene, [7 + i for i in range(5)])
    result = TrainEngine.train_toy(scenes, cfg, steps=300, seed=7)

    assert result.final_loss < 0.25 * result.initial_loss

    dets = [DetectorEngine.infer(s.cloud, result.params, cfg)[0] for s in scenes]
    curve = EvalEngine.ap_r40(dets, [s.boxes for s in scenes], 0.5, "bev")
    assert curve is not None
    assert curve.ap >= 0.9
