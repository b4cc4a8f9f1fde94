"""Local multi-scale feature aggregation.

Heatmap-driven key voxel selection on the fused stride-8 BEV tensor,
cross-scale KNN gathering on the stage 4/5/6 BEV tensors, per-scale MLP
aggregation, softmax scale weighting and scatter-back of the fused keys.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from sparsevox.config.pipeline import PipelineConfig
from sparsevox.engines import layers
from sparsevox.engines.sparse_engine import SparseEngine
from sparsevox.models.features import (
    SCALES,
    Heatmap,
    KeyVoxelSet,
    NeighborSet,
    ScaleNeighbors,
    ScaleWeights,
)
from sparsevox.models.params import ParamSpec, ParamStore
from sparsevox.models.scene import NUM_CLASSES
from sparsevox.models.sparse import SparseTensor2D

logger = logging.getLogger(__name__)

HEATMAP_BIAS_INIT = -2.19  # sigmoid -> ~0.1 prior foreground score
_BRUTE_BLOCK = 2_000_000  # max distance-matrix entries per chunk


@dataclass
class LMFAOutput:
    """Forward results plus what the backward pass needs."""

    enhanced: SparseTensor2D
    heatmap: Heatmap
    keys: KeyVoxelSet
    fused: SparseTensor2D
    neighbors: Optional[NeighborSet] = None
    aggregated: Dict[int, np.ndarray] = field(default_factory=dict)
    weights: Optional[ScaleWeights] = None
    per_scale: Dict[int, SparseTensor2D] = field(default_factory=dict)


class LMFAEngine:
    """Key voxel selection and local multi-scale aggregation."""

    @staticmethod
    def param_specs(cfg: PipelineConfig) -> List[ParamSpec]:
        c = cfg.backbone.fusion_channels
        specs = layers.linear_specs("stem", cfg.backbone.fused_width, c)
        specs += layers.linear_specs("lmfa.heatmap", c, NUM_CLASSES,
                                     bias_init=HEATMAP_BIAS_INIT, bias_std=0.0)
        for scale in SCALES:
            specs += layers.mlp2_specs(f"lmfa.mlp.s{scale}", cfg.backbone.channels[scale - 1], c, c)
        specs += layers.linear_specs("lmfa.scale_fc", c, len(SCALES))
        specs += layers.linear_specs("lmfa.fuse", 2 * c, c)
        return specs

    @staticmethod
    def stem(fused_raw: SparseTensor2D, params: ParamStore) -> SparseTensor2D:
        """Project C4+C5+C6 channels to C with a linear layer and ReLU."""
        return fused_raw.with_feats(layers.relu(layers.linear(fused_raw.feats, params, "stem")))

    @staticmethod
    def predict_heatmap(fused2d: SparseTensor2D, params: ParamStore) -> Heatmap:
        """Per-site linear map and sigmoid, one row per active site."""
        logits = layers.linear(fused2d.feats, params, "lmfa.heatmap")
        return Heatmap(scores=layers.sigmoid(logits), logits=logits)

    @staticmethod
    def neighbor_count(i: int, M: int) -> int:
        """Neighbors gathered at scale ``i``: M halved per scale step beyond stage 4.

        Raises:
            ValueError: If i is not 4, 5 or 6, or M is not a positive multiple of 4
        """
        if i not in SCALES:
            raise ValueError(f"Scale index must be one of {SCALES}, got {i}")
        if M < 4 or M % 4 != 0:
            raise ValueError(f"M must be a positive multiple of 4, got {M}")
        return M // (2 ** (i - 4))

    @staticmethod
    def select_key_voxels(hm: Heatmap, fused2d: SparseTensor2D, n_key: int,
                          rows: Optional[np.ndarray] = None) -> KeyVoxelSet:
        """Top ``n_key`` sites by max-over-class score; ties go to the lower row.

        Args:
            hm: Heatmap aligned with ``fused2d``
            fused2d: Fused stride-8 BEV tensor
            n_key: Key budget (all sites are taken when fewer exist)
            rows: Precomputed selection to reuse instead of ranking

        Raises:
            ValueError: If n_key < 1 or the heatmap is misaligned
        """
        if n_key < 1:
            raise ValueError(f"n_key must be >= 1, got {n_key}")
        if hm.num_sites != fused2d.num_active:
            raise ValueError("Heatmap rows must align with the fused tensor")
        score = hm.ranking_score
        if rows is None:
            rows = np.argsort(-score, kind="stable")[:n_key]
        rows = np.asarray(rows, dtype=np.int64)
        return KeyVoxelSet(
            rows=rows,
            coords=fused2d.coords[rows],
            feats=fused2d.feats[rows],
            scores=score[rows],
        )

    @staticmethod
    def knn_query(site_coords: np.ndarray, query_coords: np.ndarray, k: int,
                  backend: str = "auto", kdtree_threshold: int = 20000) -> Tuple[np.ndarray, np.ndarray]:
        """Exact k nearest sites of every query on integer (ix, iy) coordinates.

        Ties in distance go to the lexicographically smaller (ix, iy).

        Returns:
            (indices [Q x k] into ``site_coords`` with -1 padding, valid mask)
        """
        site_coords = np.asarray(site_coords, dtype=np.int64).reshape(-1, 2)
        query_coords = np.asarray(query_coords, dtype=np.int64).reshape(-1, 2)
        n, q = len(site_coords), len(query_coords)
        indices = np.full((q, k), -1, dtype=np.int64)
        mask = np.zeros((q, k), dtype=bool)
        take = min(k, n)
        if take == 0 or q == 0:
            return indices, mask

        # lexicographic site order turns a stable distance sort into the tie rule
        order = np.lexsort((site_coords[:, 1], site_coords[:, 0]))
        sorted_sites = site_coords[order]

        if backend == "auto":
            backend = "brute" if n < kdtree_threshold else "kdtree"
        if backend == "brute":
            local = LMFAEngine._knn_brute(sorted_sites, query_coords, take)
        elif backend == "kdtree":
            local = LMFAEngine._knn_kdtree(sorted_sites, query_coords, take)
        else:
            raise ValueError(f"Unknown KNN backend '{backend}'")

        indices[:, :take] = order[local]
        mask[:, :take] = True
        return indices, mask

    @staticmethod
    def _knn_brute(sites: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
        out = np.empty((len(queries), k), dtype=np.int64)
        block = max(1, _BRUTE_BLOCK // len(sites))
        for start in range(0, len(queries), block):
            qb = queries[start:start + block]
            d2 = ((qb[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
            out[start:start + block] = np.argsort(d2, axis=1, kind="stable")[:, :k]
        return out

    @staticmethod
    def _knn_kdtree(sites: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
        tree = cKDTree(sites.astype(np.float64))
        kth, _ = tree.query(queries.astype(np.float64), k=[k])
        candidates = tree.query_ball_point(queries.astype(np.float64), r=kth[:, 0] + 1e-6)
        out = np.empty((len(queries), k), dtype=np.int64)
        for qi, cand in enumerate(candidates):
            cand = np.asarray(cand, dtype=np.int64)
            d2 = ((sites[cand] - queries[qi]) ** 2).sum(axis=1)
            out[qi] = cand[np.lexsort((cand, d2))[:k]]
        return out

    @staticmethod
    def knn_gather(keys: KeyVoxelSet, per_scale: Dict[int, SparseTensor2D], M: int,
                   backend: str = "auto", kdtree_threshold: int = 20000,
                   indices: Optional[Dict[int, np.ndarray]] = None) -> NeighborSet:
        """Gather the nearest sites of every key at stages 4, 5 and 6.

        Key coordinates (stride 8) are floor-divided by 1, 2 and 4 into each
        scale's own grid; a key's own cell is a candidate. Scales with fewer
        active sites than the neighbor count are padded.
        """
        scales = {}
        for scale in SCALES:
            t = per_scale[scale]
            k = LMFAEngine.neighbor_count(scale, M)
            if indices is not None:
                idx = np.asarray(indices[scale], dtype=np.int64)
                valid = idx >= 0
            else:
                if t.num_active == 0:
                    logger.warning("Scale s%d has no active sites; neighbors are all padding", scale)
                query = SparseEngine.rescale_coords(keys.coords, 2 ** (scale - 4))
                idx, valid = LMFAEngine.knn_query(t.coords, query, k, backend, kdtree_threshold)
            feats = np.zeros(idx.shape + (t.channels,), dtype=t.feats.dtype)
            feats[valid] = t.feats[idx[valid]]
            scales[scale] = ScaleNeighbors(scale=scale, indices=idx, mask=valid, feats=feats)
        return NeighborSet(scales=scales)

    @staticmethod
    def aggregate_neighbors(ns: NeighborSet, params: ParamStore) -> Dict[int, np.ndarray]:
        """Per-scale two-layer MLP on each neighbor, then mean over real neighbors.

        All-padding rows produce zero vectors.
        """
        out = {}
        for scale, nb in ns.scales.items():
            h, _ = layers.mlp2(nb.feats, params, f"lmfa.mlp.s{scale}")
            w = nb.mask[..., None].astype(h.dtype)
            count = nb.mask.sum(axis=1, keepdims=True)
            out[scale] = (h * w).sum(axis=1) / np.maximum(count, 1)
        return out

    @staticmethod
    def aggregate_backward(d_agg: Dict[int, np.ndarray], ns: NeighborSet,
                           params: ParamStore) -> Dict[int, np.ndarray]:
        """Gradients w.r.t. the gathered neighbor features [N_key x k x C_i]."""
        d_feats = {}
        for scale, nb in ns.scales.items():
            name = f"lmfa.mlp.s{scale}"
            _, hidden = layers.mlp2(nb.feats, params, name)
            count = np.maximum(nb.mask.sum(axis=1), 1)
            d_h = d_agg[scale][:, None, :] * nb.mask[..., None] / count[:, None, None]
            d_feats[scale] = layers.mlp2_backward(d_h, nb.feats, hidden, params, name)
        return d_feats

    @staticmethod
    def adaptive_fuse(key_feats: np.ndarray, agg: Dict[int, np.ndarray],
                      params: ParamStore) -> Tuple[np.ndarray, ScaleWeights]:
        """Scale-weighted blend of the aggregated features, fused with F_key.

        W = softmax(FC(F_key)); blended = sum_i W_i * agg_i;
        output = Linear(concat(F_key, blended)).
        """
        if set(agg) != set(SCALES):
            raise ValueError(f"adaptive_fuse needs aggregated features for scales {SCALES}")
        logits = layers.linear(key_feats, params, "lmfa.scale_fc")
        weights = layers.softmax(logits, axis=1)
        blended = sum(weights[:, j:j + 1] * agg[s] for j, s in enumerate(SCALES))
        fused = layers.linear(np.concatenate([key_feats, blended], axis=1), params, "lmfa.fuse")
        return fused, ScaleWeights(weights=weights, logits=logits)

    @staticmethod
    def adaptive_fuse_backward(d_out: np.ndarray, key_feats: np.ndarray, agg: Dict[int, np.ndarray],
                               weights: ScaleWeights, params: ParamStore) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
        """Returns (d key_feats, d agg per scale)."""
        w = weights.weights
        c = key_feats.shape[1]
        blended = sum(w[:, j:j + 1] * agg[s] for j, s in enumerate(SCALES))
        cat = np.concatenate([key_feats, blended], axis=1)
        d_cat = layers.linear_backward(d_out, cat, params, "lmfa.fuse")
        d_key = d_cat[:, :c].copy()
        d_blend = d_cat[:, c:]
        d_agg = {}
        d_w = np.zeros_like(w)
        for j, s in enumerate(SCALES):
            d_agg[s] = w[:, j:j + 1] * d_blend
            d_w[:, j] = np.sum(d_blend * agg[s], axis=1)
        d_logits = layers.softmax_backward(d_w, w, axis=1)
        d_key += layers.linear_backward(d_logits, key_feats, params, "lmfa.scale_fc")
        return d_key, d_agg

    @staticmethod
    def lmfa_forward(fused2d: SparseTensor2D, per_scale: Dict[int, SparseTensor2D],
                     params: ParamStore, cfg: PipelineConfig,
                     key_rows: Optional[np.ndarray] = None,
                     knn_indices: Optional[Dict[int, np.ndarray]] = None) -> LMFAOutput:
        """Heatmap, key selection, KNN, aggregation, fusion and scatter-back.

        Only the selected key rows of ``fused2d`` change; with LMFA disabled
        the enhanced tensor is ``fused2d`` itself.
        """
        hm = LMFAEngine.predict_heatmap(fused2d, params)
        if not cfg.lmfa.enabled or fused2d.num_active == 0:
            empty = np.zeros(0, dtype=np.int64)
            keys = KeyVoxelSet(empty, np.zeros((0, 2), np.int64),
                               np.zeros((0, fused2d.channels)), np.zeros(0))
            return LMFAOutput(enhanced=fused2d, heatmap=hm, keys=keys, fused=fused2d,
                              per_scale=per_scale)

        keys = LMFAEngine.select_key_voxels(hm, fused2d, cfg.lmfa.n_key, rows=key_rows)
        ns = LMFAEngine.knn_gather(keys, per_scale, cfg.lmfa.M, cfg.lmfa.knn_backend,
                                   cfg.lmfa.kdtree_threshold, indices=knn_indices)
        agg = LMFAEngine.aggregate_neighbors(ns, params)
        new_key, weights = LMFAEngine.adaptive_fuse(keys.feats, agg, params)
        enhanced = SparseEngine.scatter_rows(fused2d, keys.rows, new_key)
        logger.debug("LMFA enhanced %d of %d sites", keys.num_keys, fused2d.num_active)
        return LMFAOutput(enhanced=enhanced, heatmap=hm, keys=keys, fused=fused2d, neighbors=ns,
                          aggregated=agg, weights=weights, per_scale=per_scale)

    @staticmethod
    def lmfa_backward(out: LMFAOutput, d_enhanced: np.ndarray, d_logits: Optional[np.ndarray],
                      params: ParamStore) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
        """Backward through :meth:`lmfa_forward`.

        Args:
            out: Forward result
            d_enhanced: Gradient w.r.t. the enhanced tensor's features
            d_logits: Gradient w.r.t. the heatmap logits (or None)

        Returns:
            (d fused2d features, d per-scale BEV features keyed by scale)
        """
        fused = out.fused
        d_fused = np.array(d_enhanced, dtype=np.float64, copy=True)
        d_scale = {s: np.zeros_like(t.feats, dtype=np.float64) for s, t in out.per_scale.items()}

        if out.keys.num_keys and out.neighbors is not None:
            rows = out.keys.rows
            d_new = d_fused[rows].copy()
            d_fused[rows] = 0.0
            d_key, d_agg = LMFAEngine.adaptive_fuse_backward(
                d_new, out.keys.feats, out.aggregated, out.weights, params
            )
            d_fused[rows] += d_key
            d_nb = LMFAEngine.aggregate_backward(d_agg, out.neighbors, params)
            for s, nb in out.neighbors.scales.items():
                np.add.at(d_scale[s], nb.indices[nb.mask], d_nb[s][nb.mask])

        if d_logits is not None:
            d_fused += layers.linear_backward(d_logits, fused.feats, params, "lmfa.heatmap")
        return d_fused, d_scale
