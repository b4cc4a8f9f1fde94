"""Command-line entry point: ``sparsevox infer|train-toy|eval|gradcheck|bench``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from sparsevox.config import PRESETS, PipelineConfig, load_config, with_seed
from sparsevox.engines.detector_engine import DetectorEngine
from sparsevox.engines.eval_engine import IOU_KINDS, EvalEngine
from sparsevox.engines.train_engine import GRADCHECK_MODULES, TrainEngine
from sparsevox.exceptions import NumericError
from sparsevox.io.box_io import read_box_sets, write_boxes
from sparsevox.io.checkpoint import load_checkpoint, save_checkpoint
from sparsevox.io.point_io import read_point_bin
from sparsevox.io.scene_generate import SceneGenerator
from sparsevox.models.detection import STAGE_NAMES, DetectionBox, RunReport
from sparsevox.models.params import ParamStore
from sparsevox.models.sparse import PointCloud

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SEED_ENV = "SPARSEVOX_SEED"
GEN_PREFIX = "gen:"


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    """Flag combination that argparse cannot reject on its own."""


def log_level(verbose: int) -> int:
    """WARNING by default, DEBUG once ``-v`` is given."""
    return logging.DEBUG if verbose > 0 else logging.WARNING


def _default_seed(cfg: PipelineConfig) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return cfg.seed
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got '{raw}'") from None


def _load_cfg(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config, args.preset)
    seed = args.seed if args.seed is not None else _default_seed(cfg)
    return with_seed(cfg, seed)


def _load_params(cfg: PipelineConfig, ckpt: Optional[str]) -> ParamStore:
    init = DetectorEngine.init_params(cfg)
    if ckpt is None:
        logger.info("No checkpoint given; using seed-%d initialisation", cfg.seed)
        return init
    return load_checkpoint(ckpt, expected=init)


def _parse_source(source: str) -> Tuple[str, Optional[int]]:
    if source.startswith(GEN_PREFIX):
        try:
            return source, int(source[len(GEN_PREFIX):])
        except ValueError:
            raise UsageError(f"Generated source must be '{GEN_PREFIX}SEED', got '{source}'") from None
    return source, None


def _source_stem(source: str) -> str:
    if source.startswith(GEN_PREFIX):
        return "gen_" + source[len(GEN_PREFIX):]
    return Path(source).stem


def _load_source(source: str, cfg: PipelineConfig) -> Tuple[PointCloud, Optional[List[DetectionBox]]]:
    _, seed = _parse_source(source)
    if seed is None:
        return read_point_bin(source), None
    sample = SceneGenerator.generate_scene(cfg.scene, seed)
    return sample.cloud, sample.boxes


def _run_source(source: str, cfg: PipelineConfig, params: ParamStore, nms: bool):
    cloud, gt = _load_source(source, cfg)
    boxes, report = DetectorEngine.infer(cloud, params, cfg, nms=nms)
    report.source = source
    return boxes, report, gt


def _map_ordered(fn, items: Sequence, jobs: int) -> List:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    params = _load_params(cfg, args.ckpt)
    sources = args.points
    for source in sources:
        _parse_source(source)
    results = _map_ordered(lambda s: _run_source(s, cfg, params, not args.no_nms), sources, args.jobs)

    multi = len(sources) > 1
    for source, (boxes, report, gt) in zip(sources, results):
        out = Path(args.out) / f"{_source_stem(source)}.json" if multi else Path(args.out)
        write_boxes(boxes, out)
        if args.gt_out:
            if gt is None:
                logger.warning("No ground truth for file source %s", source)
            else:
                gt_path = Path(args.gt_out) / f"{_source_stem(source)}.json" if multi else Path(args.gt_out)
                write_boxes(gt, gt_path)
        print(f"{source}: {len(boxes)} detections, {report.total_ms:.1f} ms -> {out}")

    if args.report:
        reports = [r.to_dict() for _, r, _ in results]
        payload = reports if multi else reports[0]
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_train_toy(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    n_scenes = args.scenes if args.scenes is not None else cfg.train.scenes
    steps = args.steps if args.steps is not None else cfg.train.steps
    seeds = [cfg.seed + i for i in range(n_scenes)]
    scenes = SceneGenerator.generate_scenes(cfg.scene, seeds, jobs=args.jobs)
    print(f"Training on scenes {seeds[0]}..{seeds[-1]} for {steps} steps")

    result = TrainEngine.train_toy(scenes, cfg, steps=steps, seed=cfg.seed, csv_path=args.loss_csv)
    save_checkpoint(result.params, args.ckpt_out)
    if result.history:
        drop = result.final_loss / result.initial_loss if result.initial_loss > 0 else float("nan")
        print(f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f} (ratio {drop:.3f})")
    print(f"Checkpoint: {args.ckpt_out}  loss log: {args.loss_csv}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.preset)
    dets, gts = read_box_sets(args.dets, args.gt)
    edges = tuple(args.buckets) if args.buckets else cfg.eval.bucket_edges
    overall = EvalEngine.ap_r40(dets, gts, args.iou, args.kind)
    buckets = EvalEngine.distance_bucket_report(dets, gts, args.iou, args.kind, edges)
    print(EvalEngine.format_report(overall, buckets, args.iou, args.kind))
    per_class = EvalEngine.mean_ap(dets, gts, cfg.eval.iou_thresholds, args.kind)
    print()
    print("per-class AP R40 (" + ", ".join(f"{t:g}" for t in cfg.eval.iou_thresholds) + ")")
    for name, ap in per_class.items():
        print(f"{name:<12} {'absent' if ap is None else format(ap, '.4f'):>10}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    params = DetectorEngine.init_params(cfg)
    sample = SceneGenerator.generate_scene(cfg.scene, cfg.seed)
    plan = DetectorEngine.plan_scene(sample.cloud, cfg)

    modules = [m for m in GRADCHECK_MODULES if m != "all"] if args.module == "all" else [args.module]
    per_module = max(args.probes // len(modules), 1)
    worst = 0.0
    for i, module in enumerate(modules):
        result = TrainEngine.detector_gradcheck(plan, params, cfg, module, per_module, seed=cfg.seed + i)
        worst = max(worst, result.max_rel_error)
        status = "ok" if result.max_rel_error < args.tol else "FAIL"
        print(f"{module:<10} probes={result.probes:<4} kinks={result.skipped:<3} "
              f"max_rel_err={result.max_rel_error:.3e}  {status} {result.worst_param}")
    print(f"{'max':<10} {worst:.3e} (tolerance {args.tol:g})")
    if worst >= args.tol:
        raise NumericError(f"Gradient check failed: max relative error {worst:.3e} >= {args.tol:g}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    params = _load_params(cfg, args.ckpt)
    sources = [f"{GEN_PREFIX}{cfg.seed + i}" for i in range(args.scenes)]
    reports: List[RunReport] = [r for _, r, _ in
                                _map_ordered(lambda s: _run_source(s, cfg, params, True), sources, args.jobs)]

    print(f"{'stage':<12} {'mean ms':>10} {'std ms':>10} {'samples':>8}")
    for stage in STAGE_NAMES + ("total",):
        values = np.array([r.total_ms if stage == "total" else r.stage_ms[stage] for r in reports])
        print(f"{stage:<12} {values.mean():>10.2f} {values.std():>10.2f} {len(values):>8}")
    voxels = np.array([r.active_sites["voxels"] for r in reports])
    print(f"active voxels: mean {voxels.mean():.0f}, min {voxels.min()}, max {voxels.max()}")
    print(f"parameters: {params.num_parameters}")
    return EXIT_OK


def _common(parser: argparse.ArgumentParser, seed: bool = True) -> None:
    parser.add_argument("--config", help="flat key = value config file merged over the preset")
    parser.add_argument("--preset", choices=PRESETS, default="desk")
    if seed:
        parser.add_argument("--seed", type=int, default=None,
                            help=f"run seed (default: ${SEED_ENV} or the config seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparsevox", description="Sparse voxel 3D detection at desk scale")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log at DEBUG")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("infer", help="detect boxes in point files or generated scenes")
    _common(p)
    p.add_argument("--points", action="append", required=True,
                   help="a .bin file or gen:SEED; repeat for several sources")
    p.add_argument("--ckpt", help="checkpoint (default: seeded initialisation)")
    p.add_argument("--out", required=True, help="detections JSON (a directory with several sources)")
    p.add_argument("--report", help="RunReport JSON")
    p.add_argument("--gt-out", help="GT sidecar of generated scenes")
    p.add_argument("--no-nms", action="store_true", help="keep raw query boxes")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train-toy", help="overfit generated scenes")
    _common(p)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--ckpt-out", default="sparsevox.ckpt")
    p.add_argument("--loss-csv", default="train_loss.csv")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", help="AP R40 of detections against ground truth")
    _common(p, seed=False)
    p.add_argument("--dets", required=True, help="detections JSON or directory")
    p.add_argument("--gt", required=True, help="GT JSON or directory")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--kind", choices=IOU_KINDS, default="bev")
    p.add_argument("--buckets", type=float, nargs="+", help="distance bucket edges in m")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _common(p)
    p.add_argument("--module", choices=GRADCHECK_MODULES, default="all")
    p.add_argument("--probes", type=int, default=256)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="per-stage timings over generated scenes")
    _common(p)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--ckpt")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = log_level(args.verbose)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    for name in ("jobs", "scenes", "steps", "probes"):
        value = getattr(args, name, None)
        if value is not None and value < (0 if name == "steps" else 1):
            parser.error(f"--{name} must be {'>= 0' if name == 'steps' else '>= 1'}")

    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
