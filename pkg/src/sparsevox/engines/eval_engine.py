"""Detection evaluation: rotated BEV IoU, 3D IoU, R40 average precision.

Detections and ground truth are matched greedily in descending confidence,
class-aware, each GT at most once (KITTI convention). Inputs may be a
single scene (a list of boxes) or several scenes (a list of box lists).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from shapely.geometry import Polygon

from sparsevox.models.detection import BOX_FIELDS, DetectionBox, PRCurve
from sparsevox.models.scene import CLASS_NAMES

logger = logging.getLogger(__name__)

R40_POSITIONS = np.arange(1, 41) / 40.0
IOU_KINDS = ("bev", "3d")

Boxes = Sequence[DetectionBox]
SceneBoxes = Union[Boxes, Sequence[Boxes]]


@dataclass
class MatchResult:
    """Greedy matching of one evaluation set."""

    scores: np.ndarray  # per detection, global descending order
    tp: np.ndarray  # bool per detection in the same order
    det_center_range: np.ndarray  # own BEV range, used when unmatched
    num_gt: int
    gt_range: np.ndarray
    matched_gt_range: np.ndarray  # nan where unmatched


def _as_scenes(boxes: SceneBoxes) -> List[List[DetectionBox]]:
    if len(boxes) == 0 or isinstance(boxes[0], DetectionBox):
        return [list(boxes)]
    return [list(scene) for scene in boxes]


def _canonical(a: DetectionBox, b: DetectionBox) -> Tuple[DetectionBox, DetectionBox]:
    ka = tuple(getattr(a, f) for f in BOX_FIELDS)
    kb = tuple(getattr(b, f) for f in BOX_FIELDS)
    return (a, b) if ka <= kb else (b, a)


class EvalEngine:
    """IoU, matching and average-precision metrics."""

    @staticmethod
    def bev_polygon(box: DetectionBox) -> Polygon:
        return Polygon(box.bev_corners())

    @staticmethod
    def bev_intersection_area(a: DetectionBox, b: DetectionBox) -> float:
        """Convex clipping area of the two rotated footprints (argument order independent)."""
        first, second = _canonical(a, b)
        return float(EvalEngine.bev_polygon(first).intersection(EvalEngine.bev_polygon(second)).area)

    @staticmethod
    def bev_rotated_iou(a: DetectionBox, b: DetectionBox) -> float:
        """Rotated BEV IoU in [0, 1]; 0 for degenerate boxes."""
        inter = EvalEngine.bev_intersection_area(a, b)
        union = a.l * a.w + b.l * b.w - inter
        if union <= 0.0:
            return 0.0
        return float(min(max(inter / union, 0.0), 1.0))

    @staticmethod
    def iou3d(a: DetectionBox, b: DetectionBox) -> float:
        """BEV intersection area x z overlap over the volume union."""
        a_lo, a_hi = a.z_extent
        b_lo, b_hi = b.z_extent
        z_overlap = max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))
        if z_overlap == 0.0:
            return 0.0
        inter = EvalEngine.bev_intersection_area(a, b) * z_overlap
        union = a.l * a.w * a.h + b.l * b.w * b.h - inter
        if union <= 0.0:
            return 0.0
        return float(min(max(inter / union, 0.0), 1.0))

    @staticmethod
    def iou(a: DetectionBox, b: DetectionBox, kind: str = "bev") -> float:
        if kind == "bev":
            return EvalEngine.bev_rotated_iou(a, b)
        if kind == "3d":
            return EvalEngine.iou3d(a, b)
        raise ValueError(f"IoU kind must be one of {IOU_KINDS}, got '{kind}'")

    @staticmethod
    def match(dets: SceneBoxes, gts: SceneBoxes, iou_thresh: float, kind: str = "bev",
              class_aware: bool = True) -> MatchResult:
        """Greedy descending-confidence matching, scene by scene.

        Raises:
            ValueError: If dets and gts cover a different number of scenes
        """
        det_scenes = _as_scenes(dets)
        gt_scenes = _as_scenes(gts)
        if len(det_scenes) != len(gt_scenes):
            raise ValueError(f"{len(det_scenes)} detection scenes but {len(gt_scenes)} GT scenes")

        scores, tp, centers, matched_range = [], [], [], []
        gt_range = []
        for scene_dets, scene_gts in zip(det_scenes, gt_scenes):
            gt_range.extend(g.bev_range for g in scene_gts)
            taken = np.zeros(len(scene_gts), dtype=bool)
            order = sorted(range(len(scene_dets)), key=lambda i: -scene_dets[i].score)
            for i in order:
                det = scene_dets[i]
                best, best_iou = -1, iou_thresh
                for j, gt in enumerate(scene_gts):
                    if taken[j] or (class_aware and gt.cls != det.cls):
                        continue
                    value = EvalEngine.iou(det, gt, kind)
                    if value >= best_iou and (best < 0 or value > best_iou):
                        best, best_iou = j, value
                scores.append(det.score)
                centers.append(det.bev_range)
                if best >= 0:
                    taken[best] = True
                    tp.append(True)
                    matched_range.append(scene_gts[best].bev_range)
                else:
                    tp.append(False)
                    matched_range.append(np.nan)

        scores_arr = np.asarray(scores, dtype=np.float64)
        order = np.argsort(-scores_arr, kind="stable")
        return MatchResult(
            scores=scores_arr[order],
            tp=np.asarray(tp, dtype=bool)[order],
            det_center_range=np.asarray(centers, dtype=np.float64)[order],
            num_gt=len(gt_range),
            gt_range=np.asarray(gt_range, dtype=np.float64),
            matched_gt_range=np.asarray(matched_range, dtype=np.float64)[order],
        )

    @staticmethod
    def pr_curve(tp: np.ndarray, num_gt: int) -> Optional[PRCurve]:
        """R40 interpolated AP from TP flags in descending-confidence order; None without GT."""
        if num_gt == 0:
            return None
        tp = np.asarray(tp, dtype=bool)
        tp_cum = np.cumsum(tp)
        precision = tp_cum / np.arange(1, len(tp) + 1) if len(tp) else np.zeros(0)
        recall = tp_cum / num_gt if len(tp) else np.zeros(0)
        interpolated = np.zeros(len(R40_POSITIONS))
        for k, r in enumerate(R40_POSITIONS):
            reached = recall >= r - 1e-12
            if reached.any():
                interpolated[k] = precision[reached].max()
        return PRCurve(
            precision=precision.astype(np.float64),
            recall=recall.astype(np.float64),
            ap=float(interpolated.mean()),
            num_gt=num_gt,
            num_tp=int(tp.sum()),
        )

    @staticmethod
    def ap_r40(dets: SceneBoxes, gts: SceneBoxes, iou_thresh: float = 0.5,
               iou_kind: str = "bev") -> Optional[PRCurve]:
        """Average precision over 40 recall positions (None when there is no GT)."""
        result = EvalEngine.match(dets, gts, iou_thresh, iou_kind)
        return EvalEngine.pr_curve(result.tp, result.num_gt)

    @staticmethod
    def bucket_labels(edges: Sequence[float]) -> List[str]:
        bounds = [0.0] + list(edges)
        labels = [f"{lo:g}-{hi:g}m" for lo, hi in zip(bounds[:-1], bounds[1:])]
        return labels + [f"{bounds[-1]:g}m+"]

    @staticmethod
    def bucket_index(ranges: np.ndarray, edges: Sequence[float]) -> np.ndarray:
        """Left-closed bucket index of every range."""
        return np.searchsorted(np.asarray(edges, dtype=np.float64), ranges, side="right")

    @staticmethod
    def distance_bucket_report(dets: SceneBoxes, gts: SceneBoxes, iou_thresh: float = 0.5,
                               iou_kind: str = "bev",
                               edges: Sequence[float] = (20.0, 40.0)) -> Dict[str, Optional[PRCurve]]:
        """Per-distance-bucket AP: GT by center range, detections by matched GT range.

        Unmatched detections fall in the bucket of their own center. Buckets
        without GT map to None.
        """
        result = EvalEngine.match(dets, gts, iou_thresh, iou_kind)
        det_range = np.where(result.tp, result.matched_gt_range, result.det_center_range)
        det_bucket = EvalEngine.bucket_index(det_range, edges)
        gt_bucket = EvalEngine.bucket_index(result.gt_range, edges)
        report = {}
        for b, label in enumerate(EvalEngine.bucket_labels(edges)):
            report[label] = EvalEngine.pr_curve(result.tp[det_bucket == b], int((gt_bucket == b).sum()))
        return report

    @staticmethod
    def mean_ap(dets: SceneBoxes, gts: SceneBoxes, thresholds: Sequence[float] = (0.7, 0.5, 0.5),
                iou_kind: str = "bev") -> Dict[str, Optional[float]]:
        """Per-class AP at per-class IoU thresholds plus their mean over present classes."""
        det_scenes = _as_scenes(dets)
        gt_scenes = _as_scenes(gts)
        out: Dict[str, Optional[float]] = {}
        for cls, name in enumerate(CLASS_NAMES):
            curve = EvalEngine.ap_r40(
                [[d for d in s if d.cls == cls] for s in det_scenes],
                [[g for g in s if g.cls == cls] for s in gt_scenes],
                thresholds[cls], iou_kind,
            )
            out[name] = None if curve is None else curve.ap
        present = [v for v in out.values() if v is not None]
        out["mean"] = float(np.mean(present)) if present else None
        return out

    @staticmethod
    def greedy_nms(boxes: Boxes, iou_thresh: float = 0.5) -> List[DetectionBox]:
        """Class-wise greedy BEV suppression; survivors in descending confidence."""
        order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
        kept: List[DetectionBox] = []
        for i in order:
            box = boxes[i]
            if all(k.cls != box.cls or EvalEngine.bev_rotated_iou(k, box) < iou_thresh for k in kept):
                kept.append(box)
        logger.debug("NMS kept %d of %d boxes", len(kept), len(boxes))
        return kept

    @staticmethod
    def format_report(overall: Optional[PRCurve], buckets: Dict[str, Optional[PRCurve]],
                      iou_thresh: float, kind: str) -> str:
        """Plain-text AP table."""
        lines = [f"AP R40 ({kind.upper()} IoU >= {iou_thresh:g})", "-" * 36]
        rows = [("overall", overall)] + list(buckets.items())
        for label, curve in rows:
            if curve is None:
                lines.append(f"{label:<12} {'absent':>10}")
            else:
                lines.append(f"{label:<12} {curve.ap:>10.4f}   gt={curve.num_gt} tp={curve.num_tp}")
        return "\n".join(lines)
