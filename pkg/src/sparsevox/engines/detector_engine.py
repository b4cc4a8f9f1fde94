"""End-to-end detector: voxels -> backbone -> fusion -> LMFA -> GFA -> boxes.

The coordinate-only work of a scene (voxelization, rulebooks, fusion and
height-compression maps) is planned once in :class:`ScenePlan` and reused
by every forward/backward pass over that scene.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from sparsevox.config.pipeline import PipelineConfig
from sparsevox.engines import layers
from sparsevox.engines.backbone_engine import (
    STAGE_STRIDES,
    BackboneCache,
    BackboneEngine,
    BackbonePlan,
    FusionPlan,
)
from sparsevox.engines.eval_engine import EvalEngine
from sparsevox.engines.gfa_engine import QUERY_STRIDE, GFAEngine, GFAOutput
from sparsevox.engines.lmfa_engine import LMFAEngine, LMFAOutput
from sparsevox.engines.sparse_engine import SparseEngine, VoxelizeStats
from sparsevox.models.detection import STAGE_NAMES, DetectionBox, RunReport
from sparsevox.models.features import SCALES
from sparsevox.models.params import ParamSpec, ParamStore
from sparsevox.models.sparse import CoordIndex, PointCloud, SparseTensor2D, SparseTensor3D

logger = logging.getLogger(__name__)


@dataclass
class FrozenSelection:
    """Discrete choices of one forward pass, replayable so finite differences stay smooth."""

    key_rows: Optional[np.ndarray] = None
    knn_indices: Optional[Dict[int, np.ndarray]] = None
    query_rows: Optional[np.ndarray] = None
    kv_rows: Optional[np.ndarray] = None


@dataclass
class ScenePlan:
    """Parameter-independent structure of one scene."""

    voxels: SparseTensor3D
    stats: VoxelizeStats
    feats0: np.ndarray
    backbone: BackbonePlan
    fusion: FusionPlan
    fused_coords: np.ndarray  # stride-8 BEV
    fused_inverse: np.ndarray
    fused_index: CoordIndex
    scale_coords: Dict[int, np.ndarray]
    scale_inverse: Dict[int, np.ndarray]
    scale_index: Dict[int, CoordIndex]
    timing_ms: Dict[str, float] = field(default_factory=dict)

    @property
    def num_bev_sites(self) -> int:
        return len(self.fused_coords)


@dataclass
class DetectorOutput:
    """Everything a forward pass produced; consumed by losses, backward and decoding."""

    plan: ScenePlan
    stage_feats: List[np.ndarray]
    backbone_cache: BackboneCache
    fused_raw: np.ndarray
    stem_feats: np.ndarray
    lmfa: LMFAOutput
    gfa: GFAOutput
    frozen: FrozenSelection
    timing_ms: Dict[str, float] = field(default_factory=dict)

    @property
    def cls_logits(self) -> np.ndarray:
        return self.gfa.cls_logits

    @property
    def reg(self) -> np.ndarray:
        return self.gfa.reg


class DetectorEngine:
    """Composition of the sparse detector stages with an explicit backward pass."""

    @staticmethod
    def param_specs(cfg: PipelineConfig) -> List[ParamSpec]:
        return (BackboneEngine.param_specs(cfg.backbone)
                + LMFAEngine.param_specs(cfg)
                + GFAEngine.param_specs(cfg))

    @staticmethod
    def init_params(cfg: PipelineConfig, seed: Optional[int] = None) -> ParamStore:
        """He-normal initialisation seeded by ``seed`` (default: the config seed)."""
        return ParamStore.from_specs(DetectorEngine.param_specs(cfg), cfg.seed if seed is None else seed)

    @staticmethod
    def plan_scene(cloud: PointCloud, cfg: PipelineConfig) -> ScenePlan:
        """Voxelize and build every coordinate map of the scene."""
        t0 = time.perf_counter()
        voxels, stats = SparseEngine.voxelize_with_stats(cloud, cfg.voxel)
        feats0 = voxels.feats
        if cfg.backbone.input_norm:
            feats0 = BackboneEngine.normalize_input(feats0, cfg.voxel)
        t1 = time.perf_counter()

        bplan = BackboneEngine.plan(voxels.coords, cfg.backbone)
        c4, c5, c6 = (bplan.stage_coords(s) for s in SCALES)
        fplan = BackboneEngine.fusion_plan(c4, c5, c6, tuple(cfg.backbone.channels[3:]))
        fused_bev, fused_inverse = DetectorEngine._bev_map(fplan.coords)
        scale_coords, scale_inverse, scale_index = {}, {}, {}
        for scale, coords in zip(SCALES, (c4, c5, c6)):
            bev, inverse = DetectorEngine._bev_map(coords)
            scale_coords[scale] = bev
            scale_inverse[scale] = inverse
            scale_index[scale] = CoordIndex(bev)
        t2 = time.perf_counter()

        return ScenePlan(
            voxels=voxels, stats=stats, feats0=feats0, backbone=bplan, fusion=fplan,
            fused_coords=fused_bev, fused_inverse=fused_inverse, fused_index=CoordIndex(fused_bev),
            scale_coords=scale_coords, scale_inverse=scale_inverse, scale_index=scale_index,
            timing_ms={"voxelize": (t1 - t0) * 1e3, "backbone": (t2 - t1) * 1e3},
        )

    @staticmethod
    def _bev_map(coords3d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        stub = SparseTensor3D(coords3d, np.zeros((len(coords3d), 1)), 1)
        bev, inverse = SparseEngine.height_compress_with_inverse(stub)
        return bev.coords, inverse

    @staticmethod
    def forward(plan: ScenePlan, params: ParamStore, cfg: PipelineConfig,
                frozen: Optional[FrozenSelection] = None) -> DetectorOutput:
        """Full forward pass; ``frozen`` replays the discrete selections of an earlier pass."""
        frozen = frozen or FrozenSelection()
        timing = {}

        t0 = time.perf_counter()
        stage_feats, bcache = BackboneEngine.forward(plan.backbone, plan.feats0, params)
        f4, f5, f6 = (stage_feats[s - 1] for s in SCALES)
        fused3d = BackboneEngine.fuse_forward(plan.fusion, f4, f5, f6)
        fused_raw = SparseEngine.segment_sum(fused3d, plan.fused_inverse, plan.num_bev_sites)
        per_scale = {
            s: SparseTensor2D(
                plan.scale_coords[s],
                SparseEngine.segment_sum(stage_feats[s - 1], plan.scale_inverse[s], len(plan.scale_coords[s])),
                STAGE_STRIDES[s - 1],
                _index=plan.scale_index[s],
            )
            for s in SCALES
        }
        stem_feats = layers.relu(layers.linear(fused_raw, params, "stem"))
        fused2d = SparseTensor2D(plan.fused_coords, stem_feats, QUERY_STRIDE, _index=plan.fused_index)
        t1 = time.perf_counter()

        lmfa_out = LMFAEngine.lmfa_forward(fused2d, per_scale, params, cfg,
                                           key_rows=frozen.key_rows, knn_indices=frozen.knn_indices)
        t2 = time.perf_counter()
        gfa_out = GFAEngine.gfa_forward(lmfa_out.enhanced, lmfa_out.heatmap, params, cfg,
                                        query_rows=frozen.query_rows, kv_rows=frozen.kv_rows,
                                        with_heads=False)
        t3 = time.perf_counter()
        gfa_out.cls_logits, gfa_out.reg = GFAEngine.heads_forward(gfa_out.decoded, params)
        t4 = time.perf_counter()

        timing["backbone"] = (t1 - t0) * 1e3
        timing["lmfa"] = (t2 - t1) * 1e3
        timing["gfa"] = (t3 - t2) * 1e3
        timing["heads"] = (t4 - t3) * 1e3

        captured = FrozenSelection(
            key_rows=lmfa_out.keys.rows,
            knn_indices=({s: nb.indices for s, nb in lmfa_out.neighbors.scales.items()}
                         if lmfa_out.neighbors is not None else None),
            query_rows=gfa_out.queries.rows,
            kv_rows=(gfa_out.kv.rows[gfa_out.kv.valid_mask] if gfa_out.kv is not None else None),
        )
        return DetectorOutput(plan=plan, stage_feats=stage_feats, backbone_cache=bcache,
                              fused_raw=fused_raw, stem_feats=stem_feats, lmfa=lmfa_out, gfa=gfa_out,
                              frozen=captured, timing_ms=timing)

    @staticmethod
    def backward(out: DetectorOutput, params: ParamStore, d_hm_logits: Optional[np.ndarray] = None,
                 d_cls: Optional[np.ndarray] = None, d_reg: Optional[np.ndarray] = None) -> None:
        """Accumulate parameter gradients from gradients on the three trainable outputs."""
        plan = out.plan
        d_enhanced = GFAEngine.gfa_backward(out.gfa, d_cls, d_reg, params, plan.num_bev_sites)
        if d_enhanced.shape != out.stem_feats.shape:  # scene without queries
            d_enhanced = np.zeros_like(out.stem_feats)
        d_stem, d_scale = LMFAEngine.lmfa_backward(out.lmfa, d_enhanced, d_hm_logits, params)
        d_raw = layers.linear_backward(layers.relu_backward(d_stem, out.stem_feats),
                                       out.fused_raw, params, "stem")
        d_fused3d = SparseEngine.height_compress_backward(d_raw, plan.fused_inverse)
        d_stages: List[Optional[np.ndarray]] = [None] * 6
        for s, d in zip(SCALES, BackboneEngine.fuse_backward(plan.fusion, d_fused3d)):
            d_stages[s - 1] = d + SparseEngine.height_compress_backward(d_scale[s], plan.scale_inverse[s])
        BackboneEngine.backward(plan.backbone, out.backbone_cache, d_stages, params)

    @staticmethod
    def decode(out: DetectorOutput, cfg: PipelineConfig) -> List[DetectionBox]:
        """Raw boxes, one per query."""
        return GFAEngine.decode_boxes(out.gfa.queries.pos, out.cls_logits, out.reg, cfg.voxel)

    @staticmethod
    def postprocess(boxes: List[DetectionBox], cfg: PipelineConfig,
                    nms: Optional[bool] = None) -> List[DetectionBox]:
        """Confidence threshold then optional class-wise greedy BEV suppression."""
        kept = [b for b in boxes if b.score >= cfg.post.score_threshold]
        if cfg.post.nms if nms is None else nms:
            kept = EvalEngine.greedy_nms(kept, cfg.post.nms_iou)
        return sorted(kept, key=lambda b: -b.score)

    @staticmethod
    def estimate_memory(out: DetectorOutput) -> int:
        """Bytes held by the main activations of one pass."""
        arrays = list(out.backbone_cache.outputs) + [out.fused_raw, out.stem_feats, out.lmfa.heatmap.scores]
        if out.lmfa.neighbors is not None:
            arrays += [nb.feats for nb in out.lmfa.neighbors.scales.values()]
        if out.gfa.kv is not None:
            arrays += [out.gfa.kv.k_feats, out.gfa.kv.v_feats]
        for cache in (out.gfa.sasa, out.gfa.cross):
            if cache is not None:
                arrays.append(cache.attn.attn)
        return int(sum(a.nbytes for a in arrays))

    @staticmethod
    def infer(cloud: PointCloud, params: ParamStore, cfg: PipelineConfig,
              nms: Optional[bool] = None) -> Tuple[List[DetectionBox], RunReport]:
        """Detect boxes in one sweep and report per-stage timings and site counts."""
        plan = DetectorEngine.plan_scene(cloud, cfg)
        out = DetectorEngine.forward(plan, params, cfg)
        t0 = time.perf_counter()
        boxes = DetectorEngine.postprocess(DetectorEngine.decode(out, cfg), cfg, nms)
        post_ms = (time.perf_counter() - t0) * 1e3

        stage_ms = {name: 0.0 for name in STAGE_NAMES}
        for timing in (plan.timing_ms, out.timing_ms):
            for name, ms in timing.items():
                stage_ms[name] += ms
        stage_ms["postprocess"] = post_ms

        active = {"voxels": plan.voxels.num_active}
        for i in range(1, 7):
            active[f"s{i}"] = len(plan.backbone.stage_coords(i))
        active["bev_fused"] = plan.num_bev_sites
        active["keys"] = out.lmfa.keys.num_keys
        active["queries"] = out.gfa.queries.num_queries

        report = RunReport(
            stage_ms=stage_ms,
            active_sites=active,
            peak_memory_bytes=DetectorEngine.estimate_memory(out),
            detection_count=len(boxes),
            num_parameters=params.num_parameters,
            precision_bits=64,
            source=cloud.source_file,
        )
        logger.debug("Inference on %s: %d voxels, %d detections", cloud.source_file,
                     plan.voxels.num_active, len(boxes))
        return boxes, report
