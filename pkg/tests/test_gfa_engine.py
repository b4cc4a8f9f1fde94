"""Tests for query initialization, scale-adaptive self-attention, cross attention and heads."""

import math
from dataclasses import replace

import numpy as np
import pytest

from sparsevox.config import preset_config
from sparsevox.engines.gfa_engine import QUERY_STRIDE, GFAEngine
from sparsevox.models.features import Heatmap, KVSet, QuerySet
from sparsevox.models.params import ParamStore
from sparsevox.models.sparse import SparseTensor2D

CFG = preset_config("desk")
C = CFG.backbone.fusion_channels
HEADS = CFG.gfa.heads
EXTENT = CFG.voxel.bev_extent(QUERY_STRIDE)


def _params(seed=0):
    return ParamStore.from_specs(GFAEngine.param_specs(CFG), seed)


def _bev(rng, n=60):
    coords = np.unique(rng.integers(0, 30, size=(n, 2)), axis=0)
    fused = SparseTensor2D(coords, rng.standard_normal((len(coords), C)), 8)
    scores = rng.random((len(coords), 3))
    return fused, Heatmap(scores=scores, logits=np.log(scores / (1 - scores)))


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((7, C))
    kv = rng.standard_normal((11, C))
    _, cache = GFAEngine.attention(q, kv, kv, _params(), "gfa.cross", HEADS)
    assert cache.attn.shape == (HEADS, 7, 11)
    np.testing.assert_allclose(cache.attn.sum(axis=-1), 1.0, atol=1e-6)


def test_sasa_with_zero_eta_is_vanilla_attention():
    rng = np.random.default_rng(1)
    params = _params(1)
    q = rng.standard_normal((9, C))
    pos = rng.integers(0, 30, size=(9, 2))

    out, _ = GFAEngine.sasa_forward(q, pos, params, HEADS, eta_override=0.0)
    vanilla, _ = GFAEngine.attention(q, q, q, params, "gfa.sasa", HEADS)
    np.testing.assert_allclose(out, q + vanilla, atol=1e-6)


def test_sasa_negative_eta_favours_near_queries():
    """A strongly negative eta concentrates attention on queries within one cell."""
    rng = np.random.default_rng(2)
    params = _params(2)
    q = rng.standard_normal((4, C))
    pos = np.array([[0, 0], [0, 1], [20, 20], [25, 0]])
    _, cache = GFAEngine.sasa_forward(q, pos, params, HEADS, eta_override=-50.0)
    near = cache.attn.attn[:, 0, :2].sum(axis=-1)
    np.testing.assert_allclose(near, 1.0, atol=1e-6)


def test_sasa_learned_eta_is_nonpositive():
    rng = np.random.default_rng(3)
    params = _params(3)
    q = rng.standard_normal((5, C))
    _, cache = GFAEngine.sasa_forward(q, rng.integers(0, 30, size=(5, 2)), params, HEADS)
    eta = -np.logaddexp(0.0, cache.eta_pre)
    assert np.all(eta <= 0.0)


def test_pairwise_distance_log_clamps_below_one_cell():
    dis = GFAEngine.pairwise_distances(np.array([[0, 0], [0, 1], [3, 4]]))
    np.testing.assert_allclose(dis[0], [0.0, 1.0, 5.0])
    np.testing.assert_allclose(np.log(np.maximum(dis, 1.0))[0, :2], 0.0)


def _kv(rng, n_valid, n_kv):
    feats = np.zeros((n_kv, C))
    feats[:n_valid] = rng.standard_normal((n_valid, C))
    pos = np.zeros((n_kv, 2), dtype=np.int64)
    pos[:n_valid] = rng.integers(0, 30, size=(n_valid, 2))
    valid = np.arange(n_kv) < n_valid
    rows = np.where(valid, np.arange(n_kv), -1)
    return KVSet(k_feats=feats, v_feats=feats.copy(), pos=pos, valid_mask=valid, rows=rows)


def test_cross_attention_ignores_padded_kv_contents():
    rng = np.random.default_rng(4)
    params = _params(4)
    q = rng.standard_normal((6, C))
    q_pe = rng.standard_normal((6, C))
    kv = _kv(rng, 10, 16)
    out, cache = GFAEngine.cross_forward(q, q_pe, kv, params, HEADS, EXTENT, mask_padded=True)

    garbage = KVSet(
        k_feats=np.where(kv.valid_mask[:, None], kv.k_feats, 1e3),
        v_feats=np.where(kv.valid_mask[:, None], kv.v_feats, -7.0),
        pos=np.where(kv.valid_mask[:, None], kv.pos, 99),
        valid_mask=kv.valid_mask,
        rows=kv.rows,
    )
    out_garbage, _ = GFAEngine.cross_forward(q, q_pe, garbage, params, HEADS, EXTENT, mask_padded=True)

    np.testing.assert_allclose(out, out_garbage, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(cache.attn.attn[:, :, 10:], 0.0)


def test_cross_attention_all_padded_raises():
    rng = np.random.default_rng(5)
    kv = _kv(rng, 0, 4)
    with pytest.raises(ValueError):
        GFAEngine.cross_forward(np.zeros((2, C)), np.zeros((2, C)), kv, _params(), HEADS, EXTENT)


def test_init_queries_and_kv_bank():
    rng = np.random.default_rng(6)
    fused, hm = _bev(rng)
    params = _params(6)

    q = GFAEngine.init_queries(fused, hm, 5, params, EXTENT)
    expected_rows = np.argsort(-hm.scores.max(axis=1), kind="stable")[:5]
    np.testing.assert_array_equal(q.rows, expected_rows)
    np.testing.assert_allclose(q.feats, q.base_feats + q.pe)
    np.testing.assert_array_equal(q.classes, hm.scores[expected_rows].argmax(axis=1))

    kv = GFAEngine.select_kv(fused, hm, fused.num_active + 5)
    assert kv.size == fused.num_active + 5
    assert kv.num_valid == fused.num_active
    np.testing.assert_array_equal(kv.k_feats[~kv.valid_mask], 0.0)

    all_q = GFAEngine.init_queries(fused, hm, 10_000, params, EXTENT)
    assert all_q.num_queries == fused.num_active


def test_gfa_disabled_heads_read_initial_queries():
    rng = np.random.default_rng(7)
    fused, hm = _bev(rng)
    cfg = replace(CFG, gfa=replace(CFG.gfa, enabled=False))
    out = GFAEngine.gfa_forward(fused, hm, _params(7), cfg)
    np.testing.assert_allclose(out.decoded, out.queries.feats)
    assert out.cls_logits.shape == (out.queries.num_queries, 3)
    assert out.reg.shape == (out.queries.num_queries, 8)
    assert out.kv is None and out.sasa is None


def test_query_set_rounds_match_gfa_forward():
    rng = np.random.default_rng(8)
    fused, hm = _bev(rng)
    params = _params(8)
    cfg = replace(CFG, gfa=replace(CFG.gfa, n_query=6, n_kv=20))

    q = GFAEngine.init_queries(fused, hm, 6, params, EXTENT)
    kv = GFAEngine.select_kv(fused, hm, 20)
    after_sasa = GFAEngine.sasa_self_attention(q, params, HEADS)
    decoded = GFAEngine.cross_attention_decode(after_sasa, kv, params, HEADS, EXTENT)
    out = GFAEngine.gfa_forward(fused, hm, params, cfg)

    np.testing.assert_array_equal(after_sasa.rows, q.rows)
    np.testing.assert_allclose(after_sasa.feats, out.after_sasa)
    np.testing.assert_allclose(decoded.feats, out.decoded)

    boxes = GFAEngine.ffn_predict(decoded, params, CFG.voxel)
    expected = GFAEngine.decode_boxes(out.queries.pos, out.cls_logits, out.reg, CFG.voxel)
    assert len(boxes) == decoded.num_queries
    for a, b in zip(boxes, expected):
        assert a.cls == b.cls
        assert a.score == pytest.approx(b.score, abs=1e-12)
        assert a.cx == pytest.approx(b.cx, abs=1e-9)


def test_decode_boxes_zero_offset_lands_on_cell_center():
    voxel = CFG.voxel
    reg = np.zeros((1, 8))
    reg[0, 2] = -0.9
    reg[0, 3:6] = np.log([4.0, 1.8, 1.5])
    reg[0, 6:8] = [math.sin(0.5), math.cos(0.5)]
    logits = np.array([[-3.0, 2.0, 0.0]])

    box = GFAEngine.decode_boxes(np.array([[3, 4]]), logits, reg, voxel)[0]

    cell = QUERY_STRIDE * voxel.voxel_size[0]
    assert box.cx == pytest.approx(3.5 * cell + voxel.point_range[0])
    assert box.cy == pytest.approx(4.5 * cell + voxel.point_range[1])
    assert box.cz == pytest.approx(-0.9)
    assert (box.l, box.w, box.h) == pytest.approx((4.0, 1.8, 1.5))
    assert box.yaw == pytest.approx(0.5)
    assert box.cls == 1
    assert box.score == pytest.approx(1.0 / (1.0 + math.exp(-2.0)))


def test_decode_boxes_clips_log_sizes_and_normalizes_yaw():
    reg = np.zeros((1, 8))
    reg[0, 3:6] = [50.0, -50.0, 0.0]
    reg[0, 6:8] = [-3.0, 0.0]
    box = GFAEngine.decode_boxes(np.array([[0, 0]]), np.zeros((1, 3)), reg, CFG.voxel)[0]
    assert box.l == pytest.approx(math.exp(4.0))
    assert box.w == pytest.approx(math.exp(-6.0))
    assert box.yaw == pytest.approx(-math.pi / 2)


def _relu_mlp(x, params, name):
    hidden = np.maximum(x @ params[f"{name}.0.weight"] + params[f"{name}.0.bias"], 0.0)
    return hidden @ params[f"{name}.1.weight"] + params[f"{name}.1.bias"]


def _naive_cross_decode(q, q_pe, kv, params):
    """Loop-by-loop cross attention over the valid K/V rows, then the residual FFN."""
    d = C // HEADS
    valid = [j for j in range(kv.size) if kv.valid_mask[j]]
    keys, values = {}, {}
    for j in valid:
        pe = _relu_mlp(kv.pos[j] / np.asarray(EXTENT, dtype=np.float64), params, "gfa.pe")
        keys[j] = (kv.k_feats[j] + pe) @ params["gfa.cross.wk"]
        values[j] = kv.v_feats[j] @ params["gfa.cross.wv"]
    out = np.zeros_like(q)
    for i in range(len(q)):
        qi = (q[i] + q_pe[i]) @ params["gfa.cross.wq"]
        ctx = np.zeros(C)
        for h in range(HEADS):
            sl = slice(h * d, (h + 1) * d)
            logits = [float(qi[sl] @ keys[j][sl]) / math.sqrt(d) for j in valid]
            top = max(logits)
            weights = [math.exp(v - top) for v in logits]
            total = sum(weights)
            for w, j in zip(weights, valid):
                ctx[sl] += w / total * values[j][sl]
        q1 = q[i] + ctx @ params["gfa.cross.wo"]
        out[i] = q1 + _relu_mlp(q1, params, "gfa.ffn")
    return out


def _query_set(rng, n):
    feats = rng.standard_normal((n, C))
    pe = rng.standard_normal((n, C))
    return QuerySet(feats=feats, base_feats=feats - pe, pos=rng.integers(0, 30, size=(n, 2)), pe=pe,
                    rows=np.arange(n), classes=np.zeros(n, dtype=np.int64))


def test_cross_attention_decode_matches_loop_reference():
    rng = np.random.default_rng(9)
    params = _params(9)
    queries = _query_set(rng, 5)
    kv = _kv(rng, 7, 12)
    decoded = GFAEngine.cross_attention_decode(queries, kv, params, HEADS, EXTENT)
    expected = _naive_cross_decode(queries.feats, queries.pe, kv, params)
    np.testing.assert_allclose(decoded.feats, expected, rtol=1e-9, atol=1e-9)
    np.testing.assert_array_equal(decoded.rows, queries.rows)


def test_cross_attention_single_valid_row_takes_all_weight():
    rng = np.random.default_rng(10)
    params = _params(10)
    q = rng.standard_normal((3, C))
    kv = _kv(rng, 1, 8)
    out, cache = GFAEngine.cross_forward(q, np.zeros_like(q), kv, params, HEADS, EXTENT)
    np.testing.assert_allclose(cache.attn.attn[:, :, 0], 1.0, atol=1e-12)

    q1 = q + (kv.v_feats[0] @ params["gfa.cross.wv"]) @ params["gfa.cross.wo"]
    np.testing.assert_allclose(out, q1 + _relu_mlp(q1, params, "gfa.ffn"), atol=1e-9)


def test_select_kv_pads_bank_to_fixed_size():
    rng = np.random.default_rng(11)
    gx, gy = np.meshgrid(np.arange(100), np.arange(90), indexing="ij")
    coords = np.stack([gx.ravel(), gy.ravel()], axis=1)
    fused = SparseTensor2D(coords, rng.standard_normal((len(coords), C)), 8)
    hm = Heatmap(scores=rng.random((len(coords), 3)))

    kv = GFAEngine.select_kv(fused, hm, 10_000)

    assert fused.num_active == 9000
    assert kv.size == 10_000
    assert kv.num_valid == 9000
    assert int((~kv.valid_mask).sum()) == 1000
    np.testing.assert_array_equal(kv.k_feats[~kv.valid_mask], 0.0)
    np.testing.assert_array_equal(kv.v_feats[~kv.valid_mask], 0.0)
    np.testing.assert_array_equal(kv.rows[~kv.valid_mask], -1)
    np.testing.assert_array_equal(np.sort(kv.rows[kv.valid_mask]), np.arange(9000))


def test_gfa_forward_encodes_query_positions_once(monkeypatch):
    rng = np.random.default_rng(12)
    fused, hm = _bev(rng)
    encode = GFAEngine.position_encoding
    calls = []

    def counting(pos, extent, params):
        calls.append(len(pos))
        return encode(pos, extent, params)

    monkeypatch.setattr(GFAEngine, "position_encoding", staticmethod(counting))
    cfg = replace(CFG, gfa=replace(CFG.gfa, n_query=6, n_kv=20))
    out = GFAEngine.gfa_forward(fused, hm, _params(12), cfg)

    assert calls == [6, 20]
    assert out.pe_cache is out.queries.pe_cache
