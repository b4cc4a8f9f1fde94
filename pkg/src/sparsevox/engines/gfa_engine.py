"""Global feature aggregation.

Queries are initialized from the highest-scoring BEV sites and refined by
one scale-adaptive self-attention round (log-distance bias scaled by a
learned per-query, per-head eta) and one cross-attention round over a
fixed-size key/value bank, then decoded into boxes by the heads.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from sparsevox.config.pipeline import PipelineConfig, VoxelGridConfig
from sparsevox.engines import layers
from sparsevox.engines.lmfa_engine import HEATMAP_BIAS_INIT
from sparsevox.engines.sparse_engine import SparseEngine
from sparsevox.models.detection import DetectionBox
from sparsevox.models.features import Heatmap, KVSet, QuerySet
from sparsevox.models.params import ParamSpec, ParamStore
from sparsevox.models.scene import NUM_CLASSES
from sparsevox.models.sparse import SparseTensor2D

logger = logging.getLogger(__name__)

QUERY_STRIDE = 8
REG_DIMS = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
_LOG_SIZE_CLIP = (-6.0, 4.0)


@dataclass
class AttentionCache:
    q_in: np.ndarray
    k_in: np.ndarray
    v_in: np.ndarray
    qh: np.ndarray
    kh: np.ndarray
    vh: np.ndarray
    attn: np.ndarray  # [H x Nq x Nk]
    ctx: np.ndarray  # heads merged, [Nq x C]
    prefix: str


@dataclass
class SasaCache:
    attn: AttentionCache
    eta_pre: Optional[np.ndarray]  # None when eta was overridden
    log_dis: np.ndarray


@dataclass
class CrossCache:
    attn: AttentionCache
    q1: np.ndarray
    ffn_hidden: np.ndarray
    kv_pe: np.ndarray
    kv_pe_cache: Tuple[np.ndarray, np.ndarray]


@dataclass
class GFAOutput:
    """Forward results of query initialization, attention and heads."""

    queries: QuerySet
    decoded: np.ndarray
    cls_logits: np.ndarray
    reg: np.ndarray
    kv: Optional[KVSet] = None
    pe_cache: Optional[Tuple[np.ndarray, np.ndarray]] = None
    sasa: Optional[SasaCache] = None
    cross: Optional[CrossCache] = None
    after_sasa: Optional[np.ndarray] = None


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, c = x.shape
    return x.reshape(n, heads, c // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


class GFAEngine:
    """Query-based global attention and the detection heads."""

    @staticmethod
    def param_specs(cfg: PipelineConfig) -> List[ParamSpec]:
        c = cfg.backbone.fusion_channels
        specs = layers.mlp2_specs("gfa.pe", 2, c, c)
        for block in ("sasa", "cross"):
            for proj in ("wq", "wk", "wv", "wo"):
                specs.append(ParamSpec(f"gfa.{block}.{proj}", (c, c), fan_in=c))
        specs += layers.linear_specs("gfa.sasa.eta", c, cfg.gfa.heads)
        specs += layers.mlp2_specs("gfa.ffn", c, cfg.gfa.ffn_hidden, c)
        specs += layers.linear_specs("gfa.head.cls", c, NUM_CLASSES,
                                     bias_init=HEATMAP_BIAS_INIT, bias_std=0.0)
        specs += layers.linear_specs("gfa.head.reg", c, REG_DIMS)
        return specs

    @staticmethod
    def position_encoding(pos: np.ndarray, extent: Tuple[int, int],
                          params: ParamStore) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
        """Two-layer MLP on positions normalized by the stride-8 grid extent.

        Returns:
            (embeddings [N x C], (normalized positions, hidden) for backward)
        """
        pos_norm = np.asarray(pos, dtype=np.float64).reshape(-1, 2) / np.asarray(extent, dtype=np.float64)
        pe, hidden = layers.mlp2(pos_norm, params, "gfa.pe")
        return pe, (pos_norm, hidden)

    @staticmethod
    def position_encoding_backward(d_pe: np.ndarray, cache: Tuple[np.ndarray, np.ndarray],
                                   params: ParamStore) -> None:
        pos_norm, hidden = cache
        layers.mlp2_backward(d_pe, pos_norm, hidden, params, "gfa.pe")

    @staticmethod
    def init_queries(fused2d: SparseTensor2D, hm: Heatmap, n_query: int, params: ParamStore,
                     extent: Tuple[int, int], rows: Optional[np.ndarray] = None) -> QuerySet:
        """Top ``n_query`` sites by max-over-class score, Q = F_query + PE_query.

        The argmax class of every selected site is recorded in ``classes``.

        Raises:
            ValueError: If n_query < 1
        """
        if n_query < 1:
            raise ValueError(f"n_query must be >= 1, got {n_query}")
        if rows is None:
            rows = np.argsort(-hm.ranking_score, kind="stable")[:n_query]
        rows = np.asarray(rows, dtype=np.int64)
        base = fused2d.feats[rows]
        pos = fused2d.coords[rows]
        pe, pe_cache = GFAEngine.position_encoding(pos, extent, params)
        classes = hm.scores[rows].argmax(axis=1) if len(rows) else np.zeros(0, dtype=np.int64)
        return QuerySet(feats=base + pe, base_feats=base, pos=pos, pe=pe, rows=rows, classes=classes,
                        pe_cache=pe_cache)

    @staticmethod
    def select_kv(fused2d: SparseTensor2D, hm: Heatmap, n_kv: int,
                  rows: Optional[np.ndarray] = None) -> KVSet:
        """Top ``n_kv`` sites by rowwise max score, zero-padded to exactly ``n_kv`` rows.

        Raises:
            ValueError: If n_kv < 1
        """
        if n_kv < 1:
            raise ValueError(f"n_kv must be >= 1, got {n_kv}")
        if rows is None:
            rows = np.argsort(-hm.ranking_score, kind="stable")[:n_kv]
        rows = np.asarray(rows, dtype=np.int64)
        n = len(rows)
        feats = np.zeros((n_kv, fused2d.channels), dtype=np.float64)
        feats[:n] = fused2d.feats[rows]
        pos = np.zeros((n_kv, 2), dtype=np.int64)
        pos[:n] = fused2d.coords[rows]
        valid = np.zeros(n_kv, dtype=bool)
        valid[:n] = True
        padded_rows = np.full(n_kv, -1, dtype=np.int64)
        padded_rows[:n] = rows
        if n < n_kv:
            logger.debug("K/V bank padded with %d zero rows", n_kv - n)
        return KVSet(k_feats=feats, v_feats=feats.copy(), pos=pos, valid_mask=valid, rows=padded_rows)

    @staticmethod
    def pairwise_distances(pos: np.ndarray) -> np.ndarray:
        """Euclidean distances between query positions in stride-8 cell units."""
        p = np.asarray(pos, dtype=np.float64).reshape(-1, 2)
        diff = p[:, None, :] - p[None, :, :]
        dis = np.sqrt((diff ** 2).sum(axis=2))
        np.fill_diagonal(dis, 0.0)
        return dis

    @staticmethod
    def attention(q_in: np.ndarray, k_in: np.ndarray, v_in: np.ndarray, params: ParamStore,
                  prefix: str, heads: int, bias: Optional[np.ndarray] = None) -> Tuple[np.ndarray, AttentionCache]:
        """Multi-head attention ``softmax(QK^T / sqrt(d) + bias) V`` with output projection.

        ``bias`` broadcasts against [H x Nq x Nk]; ``-inf`` entries are excluded.
        """
        qh = _split_heads(layers.project(q_in, params, f"{prefix}.wq"), heads)
        kh = _split_heads(layers.project(k_in, params, f"{prefix}.wk"), heads)
        vh = _split_heads(layers.project(v_in, params, f"{prefix}.wv"), heads)
        logits = qh @ kh.transpose(0, 2, 1) / math.sqrt(qh.shape[2])
        if bias is not None:
            logits = logits + bias
        attn = layers.softmax(logits, axis=-1)
        ctx = _merge_heads(attn @ vh)
        out = layers.project(ctx, params, f"{prefix}.wo")
        return out, AttentionCache(q_in, k_in, v_in, qh, kh, vh, attn, ctx, prefix)

    @staticmethod
    def attention_backward(d_out: np.ndarray, cache: AttentionCache,
                           params: ParamStore) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Returns (d q_in, d k_in, d v_in, d bias [H x Nq x Nk])."""
        prefix = cache.prefix
        heads, _, d = cache.qh.shape
        d_ctx = _split_heads(layers.project_backward(d_out, cache.ctx, params, f"{prefix}.wo"), heads)
        d_attn = d_ctx @ cache.vh.transpose(0, 2, 1)
        d_vh = cache.attn.transpose(0, 2, 1) @ d_ctx
        d_logits = layers.softmax_backward(d_attn, cache.attn, axis=-1)
        scale = 1.0 / math.sqrt(d)
        d_qh = d_logits @ cache.kh * scale
        d_kh = d_logits.transpose(0, 2, 1) @ cache.qh * scale
        d_q = layers.project_backward(_merge_heads(d_qh), cache.q_in, params, f"{prefix}.wq")
        d_k = layers.project_backward(_merge_heads(d_kh), cache.k_in, params, f"{prefix}.wk")
        d_v = layers.project_backward(_merge_heads(d_vh), cache.v_in, params, f"{prefix}.wv")
        return d_q, d_k, d_v, d_logits

    @staticmethod
    def sasa_forward(q: np.ndarray, pos: np.ndarray, params: ParamStore, heads: int,
                     eta_override: Optional[Union[float, np.ndarray]] = None) -> Tuple[np.ndarray, SasaCache]:
        """Scale-adaptive self-attention with residual.

        Per head the logits gain ``eta * log(max(Dis, 1))`` where
        ``eta = -softplus(eta_fc(Q))`` is one value per query and head.
        """
        log_dis = np.log(np.maximum(GFAEngine.pairwise_distances(pos), 1.0))
        if eta_override is None:
            eta_pre = layers.linear(q, params, "gfa.sasa.eta")
            eta = -layers.softplus(eta_pre)
        else:
            eta_pre = None
            eta = np.broadcast_to(np.asarray(eta_override, dtype=np.float64), (len(q), heads))
        bias = eta.T[:, :, None] * log_dis[None, :, :]
        out, attn_cache = GFAEngine.attention(q, q, q, params, "gfa.sasa", heads, bias)
        return q + out, SasaCache(attn=attn_cache, eta_pre=eta_pre, log_dis=log_dis)

    @staticmethod
    def sasa_backward(d_out: np.ndarray, cache: SasaCache, params: ParamStore) -> np.ndarray:
        d_q, d_k, d_v, d_bias = GFAEngine.attention_backward(d_out, cache.attn, params)
        d_in = d_out + d_q + d_k + d_v
        if cache.eta_pre is not None:
            d_eta = np.sum(d_bias * cache.log_dis[None, :, :], axis=2).T
            d_pre = -layers.softplus_backward(d_eta, cache.eta_pre)
            d_in += layers.linear_backward(d_pre, cache.attn.q_in, params, "gfa.sasa.eta")
        return d_in

    @staticmethod
    def sasa_self_attention(q: QuerySet, params: ParamStore, heads: int,
                            eta_override: Optional[Union[float, np.ndarray]] = None) -> QuerySet:
        """Queries after one SASA round (residual included)."""
        out, _ = GFAEngine.sasa_forward(q.feats, q.pos, params, heads, eta_override)
        return q.with_feats(out)

    @staticmethod
    def cross_forward(q: np.ndarray, q_pe: np.ndarray, kv: KVSet, params: ParamStore,
                      heads: int, extent: Tuple[int, int], mask_padded: bool = True) -> Tuple[np.ndarray, CrossCache]:
        """Cross attention to the K/V bank followed by a residual feed-forward block.

        Raises:
            ValueError: If the bank has no valid rows
        """
        valid = kv.valid_mask
        if not valid.any():
            raise ValueError("Cross attention over an all-padded K/V bank (degenerate scene)")
        kv_pe, pe_cache = GFAEngine.position_encoding(kv.pos, extent, params)
        kv_pe = kv_pe * valid[:, None]
        k_in = np.where(valid[:, None], kv.k_feats, 0.0) + kv_pe
        v_in = np.where(valid[:, None], kv.v_feats, 0.0)
        bias = None
        if mask_padded:
            bias = np.where(valid, 0.0, -np.inf)[None, None, :]
        out, attn_cache = GFAEngine.attention(q + q_pe, k_in, v_in, params, "gfa.cross", heads, bias)
        q1 = q + out
        ffn_out, hidden = layers.mlp2(q1, params, "gfa.ffn")
        return q1 + ffn_out, CrossCache(attn=attn_cache, q1=q1, ffn_hidden=hidden,
                                        kv_pe=kv_pe, kv_pe_cache=pe_cache)

    @staticmethod
    def cross_backward(d_out: np.ndarray, cache: CrossCache, kv: KVSet,
                       params: ParamStore) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Returns (d q, d q_pe, d K rows, d V rows) with zero gradient on padded rows."""
        d_q1 = d_out + layers.mlp2_backward(d_out, cache.q1, cache.ffn_hidden, params, "gfa.ffn")
        d_qin, d_kin, d_vin, _ = GFAEngine.attention_backward(d_q1, cache.attn, params)
        valid = kv.valid_mask[:, None]
        d_kin = d_kin * valid
        GFAEngine.position_encoding_backward(d_kin, cache.kv_pe_cache, params)
        return d_q1 + d_qin, d_qin, d_kin, d_vin * valid

    @staticmethod
    def cross_attention_decode(q: QuerySet, kv: KVSet, params: ParamStore, heads: int,
                               extent: Tuple[int, int], mask_padded: bool = True) -> QuerySet:
        """Queries after the cross-attention decoder round."""
        out, _ = GFAEngine.cross_forward(q.feats, q.pe, kv, params, heads, extent, mask_padded)
        return q.with_feats(out)

    @staticmethod
    def heads_forward(q: np.ndarray, params: ParamStore) -> Tuple[np.ndarray, np.ndarray]:
        """(class logits [N x Cls], regression [N x 8])."""
        return layers.linear(q, params, "gfa.head.cls"), layers.linear(q, params, "gfa.head.reg")

    @staticmethod
    def heads_backward(d_cls: Optional[np.ndarray], d_reg: Optional[np.ndarray], q: np.ndarray,
                       params: ParamStore) -> np.ndarray:
        d_q = np.zeros_like(q)
        if d_cls is not None:
            d_q += layers.linear_backward(d_cls, q, params, "gfa.head.cls")
        if d_reg is not None:
            d_q += layers.linear_backward(d_reg, q, params, "gfa.head.reg")
        return d_q

    @staticmethod
    def ffn_predict(q: QuerySet, params: ParamStore, voxel: VoxelGridConfig) -> List[DetectionBox]:
        """One raw box per decoded query."""
        cls_logits, reg = GFAEngine.heads_forward(q.feats, params)
        return GFAEngine.decode_boxes(q.pos, cls_logits, reg, voxel)

    @staticmethod
    def decode_boxes(pos: np.ndarray, cls_logits: np.ndarray, reg: np.ndarray,
                     voxel: VoxelGridConfig, stride: int = QUERY_STRIDE) -> List[DetectionBox]:
        """Map head outputs to metric boxes.

        Center = (cell + 0.5 + offset) * stride * voxel + range_min, so a zero
        offset lands on the cell center. Yaw is the angle of the normalized
        (sin, cos) pair; confidence is the max class probability.
        """
        if len(pos) == 0:
            return []
        probs = layers.sigmoid(cls_logits)
        cls = probs.argmax(axis=1)
        score = probs.max(axis=1)
        xy = SparseEngine.to_world_xy(np.asarray(pos, dtype=np.float64) + reg[:, :2], stride, voxel)
        sizes = np.exp(np.clip(reg[:, 3:6], *_LOG_SIZE_CLIP))
        sin_cos = reg[:, 6:8]
        norm = np.linalg.norm(sin_cos, axis=1, keepdims=True)
        sin_cos = np.where(norm > 0, sin_cos / np.maximum(norm, 1e-12), np.array([0.0, 1.0]))
        yaw = np.arctan2(sin_cos[:, 0], sin_cos[:, 1])
        return [
            DetectionBox(
                cx=float(xy[i, 0]), cy=float(xy[i, 1]), cz=float(reg[i, 2]),
                l=float(sizes[i, 0]), w=float(sizes[i, 1]), h=float(sizes[i, 2]),
                yaw=float(yaw[i]), cls=int(cls[i]), score=float(np.clip(score[i], 0.0, 1.0)),
            )
            for i in range(len(pos))
        ]

    @staticmethod
    def gfa_forward(enhanced: SparseTensor2D, hm: Heatmap, params: ParamStore, cfg: PipelineConfig,
                    query_rows: Optional[np.ndarray] = None,
                    kv_rows: Optional[np.ndarray] = None, with_heads: bool = True) -> GFAOutput:
        """Query init, SASA, cross attention and (optionally) heads over the enhanced BEV tensor."""
        extent = cfg.voxel.bev_extent(QUERY_STRIDE)
        queries = GFAEngine.init_queries(enhanced, hm, cfg.gfa.n_query, params, extent, rows=query_rows)
        out = GFAOutput(queries=queries, decoded=queries.feats, cls_logits=np.zeros((0, NUM_CLASSES)),
                        reg=np.zeros((0, REG_DIMS)), pe_cache=queries.pe_cache)
        if queries.num_queries == 0:
            return out

        if cfg.gfa.enabled:
            kv = GFAEngine.select_kv(enhanced, hm, cfg.gfa.n_kv, rows=kv_rows)
            after_sasa, sasa_cache = GFAEngine.sasa_forward(queries.feats, queries.pos, params, cfg.gfa.heads)
            decoded, cross_cache = GFAEngine.cross_forward(
                after_sasa, queries.pe, kv, params, cfg.gfa.heads, extent, cfg.gfa.mask_padded
            )
            out.kv, out.sasa, out.cross, out.after_sasa = kv, sasa_cache, cross_cache, after_sasa
            out.decoded = decoded

        if with_heads:
            out.cls_logits, out.reg = GFAEngine.heads_forward(out.decoded, params)
        return out

    @staticmethod
    def gfa_backward(out: GFAOutput, d_cls: Optional[np.ndarray], d_reg: Optional[np.ndarray],
                     params: ParamStore, num_sites: int) -> np.ndarray:
        """Gradient w.r.t. the enhanced BEV features [num_sites x C]."""
        q = out.queries
        d_enhanced = np.zeros((num_sites, q.base_feats.shape[1] if q.num_queries else 0))
        if q.num_queries == 0:
            return d_enhanced
        d_q = GFAEngine.heads_backward(d_cls, d_reg, out.decoded, params)
        d_pe = np.zeros_like(q.pe)
        if out.cross is not None:
            d_q, d_qpe, d_k, d_v = GFAEngine.cross_backward(d_q, out.cross, out.kv, params)
            d_pe += d_qpe
            valid = out.kv.valid_mask
            np.add.at(d_enhanced, out.kv.rows[valid], d_k[valid] + d_v[valid])
            d_q = GFAEngine.sasa_backward(d_q, out.sasa, params)
        # Q = F_query + PE_query
        d_pe += d_q
        GFAEngine.position_encoding_backward(d_pe, out.pe_cache, params)
        np.add.at(d_enhanced, q.rows, d_q)
        return d_enhanced
