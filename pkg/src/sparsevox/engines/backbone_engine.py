"""Sparse 3D convolutional backbone.

Six stages with feature strides (1, 2, 4, 8, 16, 32). Stage 1 runs
submanifold layers at full resolution; every later stage opens with a
strided 3x3x3 transition (stride 2, padding 1) followed by submanifold
layers. Convolutions follow the gather-matmul-scatter formulation over a
per-offset rulebook built from the coordinate index.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from sparsevox.config.pipeline import BackboneConfig, VoxelGridConfig
from sparsevox.models.params import BIAS_INIT_STD, ParamSpec, ParamStore
from sparsevox.models.sparse import CoordIndex, SparseTensor3D, pack_coords, unpack_coords

logger = logging.getLogger(__name__)

# Offset k of the 3x3x3 kernel; index 13 is the center tap.
KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_OFFSET = 13
STAGE_STRIDES = (1, 2, 4, 8, 16, 32)

SUBMANIFOLD = "submanifold"
STRIDED = "strided"


@dataclass
class ConvLayerSpec:
    """One sparse 3x3x3 convolution layer; weights live in the ParamStore under ``name``."""

    name: str
    kind: str
    in_channels: int
    out_channels: int
    relu: bool = True
    kernel: Tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        if self.kind not in (SUBMANIFOLD, STRIDED):
            raise ValueError(f"Unknown conv kind '{self.kind}'")
        if self.kernel != (3, 3, 3):
            raise ValueError("Only 3x3x3 kernels are supported")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("Channel counts must be >= 1")

    @property
    def stride(self) -> int:
        return 2 if self.kind == STRIDED else 1

    def param_specs(self) -> List[ParamSpec]:
        volume = len(KERNEL_OFFSETS)
        return [
            ParamSpec(f"{self.name}.weight", (volume, self.in_channels, self.out_channels),
                      fan_in=volume * self.in_channels),
            ParamSpec(f"{self.name}.bias", (self.out_channels,), init_std=BIAS_INIT_STD),
        ]


@dataclass
class Rulebook:
    """Input/output row pairs per kernel offset.

    Within one offset every input row and every output row appears at most
    once, so scatter-adds can use plain fancy indexing.
    """

    out_coords: np.ndarray
    pairs: List[Tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def num_out(self) -> int:
        return len(self.out_coords)


@dataclass
class StageOutputs:
    """F_s1 .. F_s6."""

    stages: List[SparseTensor3D]

    def __post_init__(self):
        if len(self.stages) != 6:
            raise ValueError("Backbone produces exactly 6 stages")
        for i, t in enumerate(self.stages):
            if t.stride != STAGE_STRIDES[i]:
                raise ValueError(f"Stage {i + 1} must have stride {STAGE_STRIDES[i]}, got {t.stride}")

    def stage(self, i: int) -> SparseTensor3D:
        """1-based stage accessor."""
        return self.stages[i - 1]

    @property
    def strides(self) -> Tuple[int, ...]:
        return tuple(t.stride for t in self.stages)


@dataclass
class BackbonePlan:
    """Coordinate-only part of a backbone pass, reusable across parameter updates."""

    layers: List[ConvLayerSpec]
    rulebooks: List[Rulebook]
    stage_ends: List[int]  # layer index producing each stage output
    input_coords: np.ndarray

    def stage_coords(self, i: int) -> np.ndarray:
        return self.rulebooks[self.stage_ends[i - 1]].out_coords


@dataclass
class BackboneCache:
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]


@dataclass
class FusionPlan:
    """Row maps of s4/s5/s6 sites into the fused stride-8 tensor."""

    coords: np.ndarray
    rows: Tuple[np.ndarray, np.ndarray, np.ndarray]
    widths: Tuple[int, int, int]


class BackboneEngine:
    """Sparse convolution layers, the six-stage backbone and multi-scale fusion."""

    @staticmethod
    def layer_specs(cfg: BackboneConfig) -> List[ConvLayerSpec]:
        """Layer list; ReLU follows every layer except the final one of each stage."""
        layers = []
        in_ch = cfg.in_channels
        for stage, out_ch in enumerate(cfg.channels, start=1):
            kinds = ([] if stage == 1 else [STRIDED]) + [SUBMANIFOLD] * cfg.subm_layers
            for j, kind in enumerate(kinds):
                layers.append(ConvLayerSpec(
                    name=f"backbone.stage{stage}.layer{j}",
                    kind=kind,
                    in_channels=in_ch,
                    out_channels=out_ch,
                    relu=j < len(kinds) - 1,
                ))
                in_ch = out_ch
        return layers

    @staticmethod
    def param_specs(cfg: BackboneConfig) -> List[ParamSpec]:
        specs = []
        for layer in BackboneEngine.layer_specs(cfg):
            specs.extend(layer.param_specs())
        return specs

    @staticmethod
    def build_rulebook(in_coords: np.ndarray, kind: str, index: Optional[CoordIndex] = None) -> Rulebook:
        """Neighbor pairs of one layer.

        Submanifold: output set = input set, output o reads input o + d.
        Strided: output set = unique floor(c / 2), output o reads input 2o + d.
        """
        in_coords = np.asarray(in_coords, dtype=np.int64).reshape(-1, 3)
        if index is None:
            index = CoordIndex(in_coords)
        if kind == SUBMANIFOLD:
            out_coords = in_coords
            base = in_coords
        elif kind == STRIDED:
            if len(in_coords):
                out_coords = unpack_coords(np.unique(pack_coords(in_coords // 2)), 3)
            else:
                out_coords = np.zeros((0, 3), dtype=np.int64)
            base = out_coords * 2
        else:
            raise ValueError(f"Unknown conv kind '{kind}'")

        book = Rulebook(out_coords=out_coords)
        if len(out_coords) == 0:
            return book
        out_rows_all = np.arange(len(out_coords), dtype=np.int64)
        for k, offset in enumerate(KERNEL_OFFSETS):
            in_rows = index.lookup(base + offset)
            hit = in_rows >= 0
            if hit.any():
                book.pairs.append((k, in_rows[hit], out_rows_all[hit]))
        return book

    @staticmethod
    def conv_forward(x: np.ndarray, book: Rulebook, weight: np.ndarray, bias: np.ndarray,
                     relu: bool) -> np.ndarray:
        out = np.zeros((book.num_out, weight.shape[2]), dtype=np.result_type(x, weight))
        for k, in_rows, out_rows in book.pairs:
            out[out_rows] += x[in_rows] @ weight[k]
        out += bias
        return np.maximum(out, 0.0) if relu else out

    @staticmethod
    def conv_backward(dy: np.ndarray, x: np.ndarray, y: np.ndarray, book: Rulebook,
                      weight: np.ndarray, relu: bool) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (dx, dW, db)."""
        dz = dy * (y > 0) if relu else dy
        dx = np.zeros_like(x, dtype=np.result_type(x, dz))
        dw = np.zeros_like(weight)
        for k, in_rows, out_rows in book.pairs:
            g = dz[out_rows]
            dw[k] += x[in_rows].T @ g
            dx[in_rows] += g @ weight[k].T
        return dx, dw, dz.sum(axis=0)

    @staticmethod
    def _apply(t: SparseTensor3D, spec: ConvLayerSpec, params: ParamStore, kind: str) -> SparseTensor3D:
        if spec.kind != kind:
            raise ValueError(f"Layer {spec.name} is {spec.kind}, expected {kind}")
        if t.channels != spec.in_channels:
            raise ValueError(
                f"Channel mismatch in {spec.name}: tensor has {t.channels}, layer expects {spec.in_channels}"
            )
        book = BackboneEngine.build_rulebook(t.coords, kind, t.index)
        feats = BackboneEngine.conv_forward(
            t.feats, book, params[f"{spec.name}.weight"], params[f"{spec.name}.bias"], spec.relu
        )
        if kind == SUBMANIFOLD:
            return SparseTensor3D(t.coords, feats, t.stride, _index=t.index)
        return SparseTensor3D(book.out_coords, feats, t.stride * 2)

    @staticmethod
    def submanifold_conv3d(t: SparseTensor3D, spec: ConvLayerSpec, params: ParamStore) -> SparseTensor3D:
        """Submanifold convolution: output active set equals input active set.

        Raises:
            ValueError: On channel or layer-kind mismatch
        """
        return BackboneEngine._apply(t, spec, params, SUBMANIFOLD)

    @staticmethod
    def strided_sparse_conv3d(t: SparseTensor3D, spec: ConvLayerSpec, params: ParamStore) -> SparseTensor3D:
        """Strided convolution: output sites are the unique floor(coord / 2), stride doubles.

        Raises:
            ValueError: On channel or layer-kind mismatch
        """
        return BackboneEngine._apply(t, spec, params, STRIDED)

    @staticmethod
    def normalize_input(feats: np.ndarray, voxel: VoxelGridConfig) -> np.ndarray:
        """Map voxel (x, y, z) means into [0, 1] by the point range; intensity untouched."""
        out = np.array(feats, dtype=np.float64, copy=True)
        lo = np.asarray(voxel.range_min)
        span = np.asarray(voxel.range_max) - lo
        out[:, :3] = (out[:, :3] - lo) / span
        return out

    @staticmethod
    def plan(input_coords: np.ndarray, cfg: BackboneConfig) -> BackbonePlan:
        """Build every layer's rulebook from the stride-1 coordinates."""
        layers = BackboneEngine.layer_specs(cfg)
        rulebooks = []
        stage_ends = []
        coords = np.asarray(input_coords, dtype=np.int64).reshape(-1, 3)
        index = CoordIndex(coords)
        for li, layer in enumerate(layers):
            book = BackboneEngine.build_rulebook(coords, layer.kind, index)
            rulebooks.append(book)
            if layer.kind == STRIDED:
                coords = book.out_coords
                index = CoordIndex(coords)
            if li + 1 == len(layers) or layers[li + 1].name.split(".")[1] != layer.name.split(".")[1]:
                stage_ends.append(li)
        logger.debug("Backbone plan: stage sites %s",
                     [len(rulebooks[e].out_coords) for e in stage_ends])
        return BackbonePlan(layers=layers, rulebooks=rulebooks, stage_ends=stage_ends,
                            input_coords=np.asarray(input_coords, dtype=np.int64).reshape(-1, 3))

    @staticmethod
    def forward(plan: BackbonePlan, feats0: np.ndarray, params: ParamStore) -> Tuple[List[np.ndarray], BackboneCache]:
        """Stage feature matrices (6) and the activations needed by :meth:`backward`."""
        cache = BackboneCache(inputs=[], outputs=[])
        x = feats0
        for layer, book in zip(plan.layers, plan.rulebooks):
            y = BackboneEngine.conv_forward(
                x, book, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"], layer.relu
            )
            cache.inputs.append(x)
            cache.outputs.append(y)
            x = y
        return [cache.outputs[e] for e in plan.stage_ends], cache

    @staticmethod
    def backward(plan: BackbonePlan, cache: BackboneCache,
                 d_stages: Sequence[Optional[np.ndarray]], params: ParamStore) -> None:
        """Accumulate conv parameter gradients from per-stage output gradients."""
        end_to_stage: Dict[int, int] = {e: i for i, e in enumerate(plan.stage_ends)}
        d = None
        for li in range(len(plan.layers) - 1, -1, -1):
            stage = end_to_stage.get(li)
            if stage is not None and d_stages[stage] is not None:
                d = d_stages[stage] if d is None else d + d_stages[stage]
            if d is None:
                continue
            layer = plan.layers[li]
            dx, dw, db = BackboneEngine.conv_backward(
                d, cache.inputs[li], cache.outputs[li], plan.rulebooks[li],
                params[f"{layer.name}.weight"], layer.relu,
            )
            params.accumulate(f"{layer.name}.weight", dw)
            params.accumulate(f"{layer.name}.bias", db)
            d = dx

    @staticmethod
    def run_backbone(t0: SparseTensor3D, cfg: BackboneConfig, params: ParamStore,
                     voxel: Optional[VoxelGridConfig] = None) -> StageOutputs:
        """Six stage outputs F_s1 .. F_s6 of a stride-1 voxel tensor.

        Args:
            t0: Voxelized input at stride 1
            cfg: Backbone configuration
            params: Parameters holding every ``backbone.*`` tensor
            voxel: Grid config; required for input normalization

        Raises:
            ValueError: If t0 is not at stride 1 or channels mismatch
        """
        if t0.stride != 1:
            raise ValueError(f"Backbone input must be at stride 1, got {t0.stride}")
        if t0.channels != cfg.in_channels:
            raise ValueError(f"Backbone expects {cfg.in_channels} input channels, got {t0.channels}")
        feats0 = t0.feats
        if cfg.input_norm and voxel is not None:
            feats0 = BackboneEngine.normalize_input(feats0, voxel)
        plan = BackboneEngine.plan(t0.coords, cfg)
        stage_feats, _ = BackboneEngine.forward(plan, feats0, params)
        return StageOutputs([
            SparseTensor3D(plan.stage_coords(i + 1), f, STAGE_STRIDES[i])
            for i, f in enumerate(stage_feats)
        ])

    @staticmethod
    def fusion_plan(c4: np.ndarray, c5: np.ndarray, c6: np.ndarray,
                    widths: Tuple[int, int, int]) -> FusionPlan:
        """Union of s4 sites with s5 sites x2 and s6 sites x4, in lexicographic order."""
        mapped = [np.asarray(c4, np.int64), np.asarray(c5, np.int64) * 2, np.asarray(c6, np.int64) * 4]
        all_coords = np.concatenate(mapped, axis=0).reshape(-1, 3)
        if len(all_coords):
            union = unpack_coords(np.unique(pack_coords(all_coords)), 3)
        else:
            union = np.zeros((0, 3), dtype=np.int64)
        index = CoordIndex(union)
        rows = tuple(index.lookup(m) for m in mapped)
        return FusionPlan(coords=union, rows=rows, widths=widths)

    @staticmethod
    def fuse_forward(fplan: FusionPlan, f4: np.ndarray, f5: np.ndarray, f6: np.ndarray) -> np.ndarray:
        """Concatenate [f_s4 | f_s5 | f_s6] with zero blocks where a source is absent."""
        c4, c5, c6 = fplan.widths
        out = np.zeros((len(fplan.coords), c4 + c5 + c6), dtype=np.result_type(f4, f5, f6))
        out[fplan.rows[0], :c4] = f4
        out[fplan.rows[1], c4:c4 + c5] = f5
        out[fplan.rows[2], c4 + c5:] = f6
        return out

    @staticmethod
    def fuse_backward(fplan: FusionPlan, d_fused: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        c4, c5, _ = fplan.widths
        return (
            d_fused[fplan.rows[0], :c4],
            d_fused[fplan.rows[1], c4:c4 + c5],
            d_fused[fplan.rows[2], c4 + c5:],
        )

    @staticmethod
    def fuse_multiscale(s4: SparseTensor3D, s5: SparseTensor3D, s6: SparseTensor3D) -> SparseTensor3D:
        """F_Fusion at stride 8 from stages 4, 5 and 6.

        Raises:
            ValueError: If the strides are not 8, 16 and 32
        """
        for t, expected in ((s4, 8), (s5, 16), (s6, 32)):
            if t.stride != expected:
                raise ValueError(f"fuse_multiscale expects stride {expected}, got {t.stride}")
        fplan = BackboneEngine.fusion_plan(s4.coords, s5.coords, s6.coords,
                                           (s4.channels, s5.channels, s6.channels))
        feats = BackboneEngine.fuse_forward(fplan, s4.feats, s5.feats, s6.feats)
        return SparseTensor3D(fplan.coords, feats, 8)
