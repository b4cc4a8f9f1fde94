"""Toy training kit: target assignment, losses, gradient checks and optimizers.

Heatmaps are supervised with the penalty-reduced focal loss against
Gaussian targets centered on the active stride-8 site nearest to every
object; matched queries regress an 8-dim box target with smooth-L1.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from sparsevox.config.pipeline import PipelineConfig
from sparsevox.engines import layers
from sparsevox.engines.detector_engine import DetectorEngine, DetectorOutput, ScenePlan
from sparsevox.engines.gfa_engine import QUERY_STRIDE, REG_DIMS
from sparsevox.engines.sparse_engine import SparseEngine
from sparsevox.exceptions import NumericError
from sparsevox.models.detection import DetectionBox, LossBreakdown
from sparsevox.models.features import GaussianTargetMap
from sparsevox.models.params import ParamStore
from sparsevox.models.scene import NUM_CLASSES, SceneSample

logger = logging.getLogger(__name__)

GRADCHECK_MODULES = ("all", "backbone", "lmfa", "gfa", "heads")
_P_CLIP = 1e-12
# one-sided slopes differing by more than this share of their size point at a kink
_KINK_TOL = 1e-5
_KINK_RETRIES = 8


@dataclass
class GradCheckResult:
    """Worst finite-difference disagreement over the probed scalars."""

    module: str
    max_rel_error: float
    probes: int
    worst_param: str = ""
    skipped: int = 0


@dataclass
class OptimizerState:
    kind: str = "adam"
    step: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainResult:
    params: ParamStore
    history: List[LossBreakdown]

    @property
    def initial_loss(self) -> float:
        return self.history[0].total if self.history else float("nan")

    @property
    def final_loss(self) -> float:
        return self.history[-1].total if self.history else float("nan")


def gaussian_radius(length: float, width: float, min_overlap: float = 0.1) -> float:
    """Largest center offset keeping IoU >= min_overlap with a box of this footprint (cells)."""
    a1, b1 = 1.0, length + width
    c1 = width * length * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2

    a2, b2 = 4.0, 2 * (length + width)
    c2 = (1 - min_overlap) * width * length
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2

    a3, b3 = 4 * min_overlap, -2 * min_overlap * (length + width)
    c3 = (min_overlap - 1) * width * length
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


class TrainEngine:
    """Targets, losses, gradient checking and the overfit loop."""

    @staticmethod
    def object_radius(gt: DetectionBox, cfg: PipelineConfig) -> int:
        """Integer Gaussian radius in stride-8 cells, at least ``train.min_radius``."""
        cell = QUERY_STRIDE * np.asarray(cfg.voxel.voxel_size[:2])
        r = gaussian_radius(gt.l / cell[0], gt.w / cell[1], cfg.train.min_overlap)
        return max(cfg.train.min_radius, int(r))

    @staticmethod
    def assign_heatmap_targets(gts: Sequence[DetectionBox], fused_coords: np.ndarray,
                               cfg: PipelineConfig) -> GaussianTargetMap:
        """Gaussian heatmap targets on the active stride-8 BEV sites.

        The active site nearest to an object center (ties to the
        lexicographically smaller cell) is its positive with target 1;
        sites within the object's radius get exp(-d^2 / 2 sigma^2) with
        sigma = (2r + 1) / 6, and overlapping objects combine by max.
        Objects whose nearest site lies outside their radius are skipped.
        """
        coords = np.asarray(fused_coords, dtype=np.int64).reshape(-1, 2)
        targets = np.zeros((len(coords), NUM_CLASSES))
        positive_rows, positive_gt = [], []
        skipped = 0
        if len(coords) == 0:
            return GaussianTargetMap(targets, np.zeros(0, np.int64), np.zeros(0, np.int64), len(gts))

        lex = np.lexsort((coords[:, 1], coords[:, 0]))
        lo, hi = np.asarray(cfg.voxel.range_min), np.asarray(cfg.voxel.range_max)
        for g, gt in enumerate(gts):
            center = np.asarray(gt.center)
            if np.any(center[:2] < lo[:2]) or np.any(center[:2] >= hi[:2]):
                skipped += 1
                continue
            u = SparseEngine.to_cell_xy(center[:2], QUERY_STRIDE, cfg.voxel)[0]
            d2 = ((coords[lex] - u) ** 2).sum(axis=1)
            nearest = int(lex[np.argmin(d2)])
            radius = TrainEngine.object_radius(gt, cfg)
            if math.sqrt(float(d2.min())) > radius:
                skipped += 1
                logger.debug("Skipping object %d: nearest active site beyond radius %d", g, radius)
                continue
            sigma = (2 * radius + 1) / 6.0
            dd2 = ((coords - coords[nearest]) ** 2).sum(axis=1)
            within = dd2 <= radius * radius
            values = np.exp(-dd2[within] / (2 * sigma * sigma))
            targets[within, gt.cls] = np.maximum(targets[within, gt.cls], values)
            targets[nearest, gt.cls] = 1.0
            positive_rows.append(nearest)
            positive_gt.append(g)
        return GaussianTargetMap(
            targets=targets,
            positive_rows=np.asarray(positive_rows, dtype=np.int64),
            positive_gt=np.asarray(positive_gt, dtype=np.int64),
            skipped=skipped,
        )

    @staticmethod
    def focal_loss(pred: np.ndarray, tgt: np.ndarray, alpha: float = 2.0,
                   beta: float = 4.0) -> Tuple[float, np.ndarray]:
        """Penalty-reduced focal loss and its gradient w.r.t. the probabilities.

        Normalized by the number of positives (target == 1), or by 1 without any.
        """
        p = np.clip(np.asarray(pred, dtype=np.float64), _P_CLIP, 1 - _P_CLIP)
        t = np.asarray(tgt, dtype=np.float64)
        if p.shape != t.shape:
            raise ValueError(f"Prediction {p.shape} and target {t.shape} shapes differ")
        pos = t == 1.0
        n_pos = max(int(pos.sum()), 1)
        neg_w = (1 - t) ** beta

        pos_term = (1 - p) ** alpha * np.log(p)
        neg_term = neg_w * p ** alpha * np.log(1 - p)
        loss = -float(np.where(pos, pos_term, neg_term).sum()) / n_pos

        d_pos = -alpha * (1 - p) ** (alpha - 1) * np.log(p) + (1 - p) ** alpha / p
        d_neg = neg_w * (alpha * p ** (alpha - 1) * np.log(1 - p) - p ** alpha / (1 - p))
        grad = -np.where(pos, d_pos, d_neg) / n_pos
        return loss, grad

    @staticmethod
    def focal_loss_from_logits(logits: np.ndarray, tgt: np.ndarray, alpha: float = 2.0,
                               beta: float = 4.0) -> Tuple[float, np.ndarray]:
        """Focal loss on sigmoid(logits) with the gradient taken w.r.t. the logits."""
        z = np.asarray(logits, dtype=np.float64)
        p = np.clip(layers.sigmoid(z), _P_CLIP, 1 - _P_CLIP)
        loss, _ = TrainEngine.focal_loss(p, tgt, alpha, beta)
        t = np.asarray(tgt, dtype=np.float64)
        pos = t == 1.0
        n_pos = max(int(pos.sum()), 1)
        d_pos = (1 - p) ** alpha * (alpha * p * np.log(p) - (1 - p))
        d_neg = -((1 - t) ** beta) * p ** alpha * (alpha * (1 - p) * np.log(1 - p) - p)
        return loss, np.where(pos, d_pos, d_neg) / n_pos

    @staticmethod
    def match_queries(query_pos: np.ndarray, gts: Sequence[DetectionBox], cfg: PipelineConfig,
                      radius: Optional[float] = None) -> np.ndarray:
        """Nearest GT (in stride-8 cells) within ``radius`` for every query, -1 if none."""
        radius = cfg.train.match_radius if radius is None else radius
        pos = np.asarray(query_pos, dtype=np.float64).reshape(-1, 2)
        matches = np.full(len(pos), -1, dtype=np.int64)
        if len(pos) == 0 or len(gts) == 0:
            return matches
        centers = SparseEngine.to_cell_xy(np.array([[g.cx, g.cy] for g in gts]), QUERY_STRIDE, cfg.voxel)
        dist = np.sqrt(((pos[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
        nearest = dist.argmin(axis=1)
        ok = dist[np.arange(len(pos)), nearest] <= radius
        matches[ok] = nearest[ok]
        return matches

    @staticmethod
    def regression_targets(query_pos: np.ndarray, gts: Sequence[DetectionBox], matches: np.ndarray,
                           cfg: PipelineConfig) -> np.ndarray:
        """(dx, dy, z, log l, log w, log h, sin yaw, cos yaw) for the matched queries."""
        rows = np.flatnonzero(matches >= 0)
        out = np.zeros((len(rows), REG_DIMS))
        for i, q in enumerate(rows):
            gt = gts[int(matches[q])]
            u = SparseEngine.to_cell_xy(np.array([gt.cx, gt.cy]), QUERY_STRIDE, cfg.voxel)[0]
            out[i, :2] = u - query_pos[q]
            out[i, 2] = gt.cz
            out[i, 3:6] = np.log([gt.l, gt.w, gt.h])
            out[i, 6:8] = (math.sin(gt.yaw), math.cos(gt.yaw))
        return out

    @staticmethod
    def box_regression_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
        """Smooth-L1 (delta 1) summed over the 8 dims, averaged over matched pairs."""
        pred = np.asarray(pred, dtype=np.float64)
        if len(pred) == 0:
            return 0.0, np.zeros_like(pred)
        diff = pred - target
        absd = np.abs(diff)
        loss = np.where(absd < 1.0, 0.5 * diff ** 2, absd - 0.5).sum() / len(pred)
        grad = np.where(absd < 1.0, diff, np.sign(diff)) / len(pred)
        return float(loss), grad

    @staticmethod
    def compute_losses(out: DetectorOutput, gts: Sequence[DetectionBox], cfg: PipelineConfig
                       ) -> Tuple[LossBreakdown, np.ndarray, np.ndarray, np.ndarray]:
        """Loss terms of one forward pass plus gradients on (heatmap logits, class logits, regression)."""
        tc = cfg.train
        tmap = TrainEngine.assign_heatmap_targets(gts, out.plan.fused_coords, cfg)
        vox_loss, d_hm = TrainEngine.focal_loss_from_logits(
            out.lmfa.heatmap.logits, tmap.targets, tc.focal_alpha, tc.focal_beta
        )
        rows = out.gfa.queries.rows
        q_loss, d_cls = TrainEngine.focal_loss_from_logits(
            out.cls_logits, tmap.targets[rows], tc.focal_alpha, tc.focal_beta
        )
        matches = TrainEngine.match_queries(out.gfa.queries.pos, gts, cfg)
        matched = np.flatnonzero(matches >= 0)
        target = TrainEngine.regression_targets(out.gfa.queries.pos, gts, matches, cfg)
        reg_loss, d_reg_m = TrainEngine.box_regression_loss(out.reg[matched], target)
        d_reg = np.zeros_like(out.reg)
        d_reg[matched] = tc.reg_weight * d_reg_m

        breakdown = LossBreakdown(
            voxel_heatmap_loss=vox_loss,
            query_heatmap_loss=q_loss,
            reg_loss=reg_loss,
            reg_weight=tc.reg_weight,
            positives=len(tmap.positive_rows),
            matched_queries=len(matched),
        )
        return breakdown, d_hm, d_cls, d_reg

    @staticmethod
    def grad_check(forward: Callable[[ParamStore], np.ndarray],
                   backward: Callable[[ParamStore, np.ndarray], None],
                   params: ParamStore, names: Sequence[str], probes: int = 32, seed: int = 0,
                   h: float = 1e-5, abs_floor: float = 1e-5, module: str = "custom") -> GradCheckResult:
        """Compare analytic and central-difference gradients of a random-projection loss.

        The scalar loss is ``sum(R * forward(params)) / sqrt(numel)`` with a
        fixed Gaussian R; probes cycle over ``names`` so every tensor is hit.
        Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``. Scalars
        whose one-sided slopes disagree at both ``h`` and ``2h`` sit on a ReLU
        kink; they are redrawn and counted in ``skipped``.
        """
        if not names:
            raise ValueError("grad_check needs at least one parameter name")
        rng = np.random.Generator(np.random.Philox(seed))
        out0 = np.asarray(forward(params), dtype=np.float64)
        proj = rng.standard_normal(out0.shape) / math.sqrt(max(out0.size, 1))

        params.zero_grad()
        backward(params, proj)
        analytic = {name: params.grads[name].copy() for name in names}

        def loss() -> float:
            return float(np.sum(proj * forward(params)))

        loss0 = loss()

        def shifted(value: np.ndarray, idx: Tuple[int, ...], step: float) -> Tuple[float, float]:
            original = value[idx]
            value[idx] = original + step
            plus = loss()
            value[idx] = original - step
            minus = loss()
            value[idx] = original
            return plus, minus

        def on_kink(value: np.ndarray, idx: Tuple[int, ...], plus: float, minus: float) -> bool:
            fwd, bwd = (plus - loss0) / h, (loss0 - minus) / h
            d1 = fwd - bwd
            if abs(d1) <= _KINK_TOL * max(abs(fwd), abs(bwd), abs_floor):
                return False
            plus2, minus2 = shifted(value, idx, 2 * h)
            d2 = (plus2 - loss0) / (2 * h) - (loss0 - minus2) / (2 * h)
            # a smooth curve doubles the slope gap when the step doubles
            return abs(d2 - 2 * d1) > 0.1 * abs(d1)

        worst, worst_name, skipped = 0.0, "", 0
        for i in range(probes):
            name = names[i % len(names)]
            value = params[name]
            for _ in range(_KINK_RETRIES):
                idx = np.unravel_index(int(rng.integers(value.size)), value.shape)
                plus, minus = shifted(value, idx, h)
                if not on_kink(value, idx, plus, minus):
                    break
                skipped += 1
                logger.debug("Gradient check: %s%s sits on a kink, redrawing", name, list(idx))
            else:
                continue
            numeric = (plus - minus) / (2 * h)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            if err > worst:
                worst, worst_name = err, f"{name}{list(idx)}"
        params.zero_grad()
        return GradCheckResult(module=module, max_rel_error=worst, probes=probes, worst_param=worst_name,
                               skipped=skipped)

    @staticmethod
    def module_param_names(params: ParamStore, module: str) -> List[str]:
        """Parameter names probed for a gradcheck module."""
        if module == "backbone":
            return params.names("backbone.")
        if module == "lmfa":
            return params.names("stem.") + params.names("lmfa.")
        if module == "heads":
            return params.names("gfa.head.")
        if module == "gfa":
            return [n for n in params.names("gfa.") if not n.startswith("gfa.head.")]
        if module == "all":
            return list(params)
        raise ValueError(f"Unknown gradcheck module '{module}', expected one of {GRADCHECK_MODULES}")

    @staticmethod
    def detector_gradcheck(plan: ScenePlan, params: ParamStore, cfg: PipelineConfig, module: str = "all",
                           probes: int = 64, seed: int = 0,
                           names: Optional[Sequence[str]] = None) -> GradCheckResult:
        """Gradient check of the full detector with its discrete selections frozen."""
        frozen = DetectorEngine.forward(plan, params, cfg).frozen
        state: Dict[str, DetectorOutput] = {}

        def forward(p: ParamStore) -> np.ndarray:
            out = DetectorEngine.forward(plan, p, cfg, frozen)
            state["out"] = out
            return np.concatenate([out.lmfa.heatmap.logits.ravel(), out.cls_logits.ravel(), out.reg.ravel()])

        def backward(p: ParamStore, d_out: np.ndarray) -> None:
            out = state["out"]
            n_hm = out.lmfa.heatmap.logits.size
            n_cls = out.cls_logits.size
            d_hm = d_out[:n_hm].reshape(out.lmfa.heatmap.logits.shape)
            d_cls = d_out[n_hm:n_hm + n_cls].reshape(out.cls_logits.shape)
            d_reg = d_out[n_hm + n_cls:].reshape(out.reg.shape)
            DetectorEngine.backward(out, p, d_hm, d_cls, d_reg)

        if names is None:
            names = TrainEngine.module_param_names(params, module)
        return TrainEngine.grad_check(forward, backward, params, names, probes, seed, module=module)

    @staticmethod
    def clip_gradients(params: ParamStore, max_norm: float) -> float:
        """Scale gradients to a global norm of at most ``max_norm``; returns the pre-clip norm."""
        norm = params.global_grad_norm()
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for grad in params.grads.values():
                grad *= scale
        return norm

    @staticmethod
    def optimizer_step(params: ParamStore, lr: float, kind: str = "adam",
                       state: Optional[OptimizerState] = None) -> ParamStore:
        """One SGD or Adam (0.9, 0.999, 1e-8) update in place.

        Raises:
            NumericError: If any gradient is NaN or infinite
        """
        for name, grad in params.grads.items():
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"Non-finite gradient in parameter '{name}'")
        if kind == "sgd":
            for name in params:
                params.params[name] -= lr * params.grads[name]
            return params
        if kind != "adam":
            raise ValueError(f"Unknown optimizer '{kind}'")

        state = state if state is not None else OptimizerState()
        state.step += 1
        b1, b2 = state.betas
        for name in params:
            g = params.grads[name]
            m = state.m.setdefault(name, np.zeros_like(g))
            v = state.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** state.step)
            v_hat = v / (1 - b2 ** state.step)
            params.params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        return params

    @staticmethod
    def train_toy(scenes: Sequence[SceneSample], cfg: PipelineConfig, steps: Optional[int] = None,
                  seed: Optional[int] = None, csv_path: Optional[Union[str, Path]] = None) -> TrainResult:
        """Overfit the detector on fixed scenes; one optimizer step per pass over all scenes.

        Raises:
            NumericError: If the loss becomes non-finite (names the step)
        """
        steps = cfg.train.steps if steps is None else steps
        params = DetectorEngine.init_params(cfg, seed)
        plans = [DetectorEngine.plan_scene(s.cloud, cfg) for s in scenes]
        state = OptimizerState(kind=cfg.train.optimizer)
        history: List[LossBreakdown] = []

        for step in range(1, steps + 1):
            params.zero_grad()
            terms = np.zeros(5)
            for plan, scene in zip(plans, scenes):
                out = DetectorEngine.forward(plan, params, cfg)
                breakdown, d_hm, d_cls, d_reg = TrainEngine.compute_losses(out, scene.boxes, cfg)
                if not math.isfinite(breakdown.total):
                    raise NumericError(f"Non-finite loss at step {step}")
                scale = 1.0 / len(scenes)
                DetectorEngine.backward(out, params, d_hm * scale, d_cls * scale, d_reg * scale)
                terms += [breakdown.voxel_heatmap_loss, breakdown.query_heatmap_loss,
                          breakdown.reg_loss, breakdown.positives, breakdown.matched_queries]
            terms[:3] /= len(scenes)
            row = LossBreakdown(
                voxel_heatmap_loss=float(terms[0]),
                query_heatmap_loss=float(terms[1]),
                reg_loss=float(terms[2]),
                reg_weight=cfg.train.reg_weight,
                positives=int(terms[3]),
                matched_queries=int(terms[4]),
            )
            history.append(row)
            TrainEngine.clip_gradients(params, cfg.train.grad_clip)
            TrainEngine.optimizer_step(params, cfg.train.lr, cfg.train.optimizer, state)
            if step == 1 or step % 25 == 0 or step == steps:
                logger.info("step %d/%d total=%.4f heatmap=%.4f reg=%.4f", step, steps,
                            row.total, row.heatmap_loss, row.reg_loss)

        if csv_path is not None:
            TrainEngine.write_loss_csv(history, csv_path)
        return TrainResult(params=params, history=history)

    @staticmethod
    def write_loss_csv(history: Sequence[LossBreakdown], path: Union[str, Path]) -> None:
        """One row per step with every loss term."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = ["step"] + list(LossBreakdown(0, 0, 0, 0, 0).as_row())
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(columns)
            for step, row in enumerate(history, start=1):
                writer.writerow([step] + [f"{v:.10g}" for v in row.as_row().values()])


__all__ = [
    "GRADCHECK_MODULES",
    "GradCheckResult",
    "OptimizerState",
    "TrainEngine",
    "TrainResult",
    "gaussian_radius",
]
