"""Command-line entry point: presets | synth | run | bench | eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

from . import archspec, costbench, heads, metrics
from .archspec import DetectorSpec, SpecError
from .network import WeightFileError, build, load_weights
from .pointcloud import (
    CLASSES,
    CloudFormatError,
    VoxelGridSpec,
    load_cloud,
    read_labels,
    reference_scene,
    synth_scene,
    write_cloud,
    write_labels,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str | None
    spec_file: str | None
    head: str
    grid_dims: tuple
    voxel_size: tuple
    seed: int
    score_threshold: float | None
    nms_iou: float | None
    pre_nms_top_k: int | None
    post_nms_top_k: int | None
    threads: int
    weights: str | None = None

    def __post_init__(self):
        if (self.preset is None) == (self.spec_file is None):
            raise UsageError("exactly one of a preset or a spec file is required")
        for path in (self.spec_file, self.weights):
            if path is not None and not os.path.isfile(path):
                raise UsageError(f"file not found: {path}")
        if self.threads < 1:
            raise UsageError("--threads must be >= 1")

    @property
    def grid(self) -> VoxelGridSpec:
        return VoxelGridSpec.from_dims(self.grid_dims, self.voxel_size)

    def spec(self) -> DetectorSpec:
        if self.spec_file is not None:
            with open(self.spec_file) as fh:
                try:
                    spec = archspec.loads(fh.read())
                except json.JSONDecodeError as exc:
                    raise SpecError(f"{self.spec_file}: invalid JSON ({exc})") from None
        else:
            spec = archspec.preset(self.preset, self.head)
        overrides = {k: getattr(self, k) for k in
                     ("score_threshold", "nms_iou", "pre_nms_top_k", "post_nms_top_k")
                     if getattr(self, k) is not None}
        if overrides:
            spec = archspec.with_head(spec, **overrides)
        return archspec.check(spec)

    def detector(self):
        spec = self.spec()
        if self.weights is not None:
            return load_weights(spec, self.weights)
        return build(spec, self.seed)


def _add_model_args(p: argparse.ArgumentParser, multi: bool = False):
    if multi:
        p.add_argument("--preset", nargs="+", default=None, help="one or more preset names")
        p.add_argument("--spec", nargs="+", default=None, help="spec JSON file(s)")
    else:
        p.add_argument("--preset", default=None, help="preset name (default A0)")
        p.add_argument("--spec", default=None, help="spec JSON file; overrides --preset")
        p.add_argument("--weights", default=None, help="weight file written by save_weights")
    p.add_argument("--head", choices=archspec.HEAD_KINDS, default="anchor")
    p.add_argument("--grid-dims", nargs=3, type=int, default=(512, 512, 40), metavar=("X", "Y", "Z"))
    p.add_argument("--voxel-size", nargs=3, type=float, default=(0.1, 0.1, 0.15),
                   metavar=("VX", "VY", "VZ"))
    p.add_argument("--seed", type=int, default=0, help="weight seed")
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--nms-iou", type=float, default=None)
    p.add_argument("--pre-nms-top-k", type=int, default=None)
    p.add_argument("--post-nms-top-k", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)


def _config(args, preset=None, spec_file=None) -> RunConfig:
    if spec_file is None and preset is None:
        preset = "A0"
    return RunConfig(
        preset=None if spec_file is not None else preset,
        spec_file=spec_file,
        head=args.head,
        grid_dims=tuple(args.grid_dims),
        voxel_size=tuple(args.voxel_size),
        seed=args.seed,
        score_threshold=args.score_threshold,
        nms_iou=args.nms_iou,
        pre_nms_top_k=args.pre_nms_top_k,
        post_nms_top_k=args.post_nms_top_k,
        threads=args.threads,
        weights=getattr(args, "weights", None),
    )


def _emit(text: str, out: str | None):
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# Subcommands


def _resolution_formula(spec: DetectorSpec) -> str:
    f = archspec.pre_head_factor(spec)
    if f == 1:
        return "(X, Y)"
    if f.denominator == 1:
        return f"(X/{f}, Y/{f})"
    return f"({1 / f}·X, {1 / f}·Y)"


def cmd_presets(args) -> int:
    rows = []
    for spec in archspec.all_presets():
        rows.append({
            "name": spec.name,
            "head": spec.head.kind,
            "depths_3d": [s.depth for s in spec.stages3d],
            "widths_3d": [s.width for s in spec.stages3d],
            "depths_2d": [s.depth for s in spec.stages2d],
            "widths_2d": [s.width for s in spec.stages2d],
            "pre_head": _resolution_formula(spec),
            "params": archspec.count_params(spec),
        })
    if args.format == "json":
        _emit(json.dumps(rows, indent=1, ensure_ascii=False) + "\n", None)
        return EXIT_OK

    def fmt(v):
        return "(" + ",".join(map(str, v)) + ")"

    header = f"{'name':<16}{'head':<8}{'3D depths':<15}{'3D widths':<20}{'2D depths':<11}" \
             f"{'2D widths':<11}{'pre-head':<14}{'params (M)':>10}"
    lines = [header]
    for r in rows:
        lines.append(f"{r['name']:<16}{r['head']:<8}{fmt(r['depths_3d']):<15}{fmt(r['widths_3d']):<20}"
                     f"{fmt(r['depths_2d']):<11}{fmt(r['widths_2d']):<11}{r['pre_head']:<14}"
                     f"{r['params'] / 1e6:>10.3f}")
    _emit("\n".join(lines) + "\n", None)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n_scenes < 0 or args.n_objects < 0:
        raise UsageError("--n-scenes and --n-objects must be >= 0")
    grid = VoxelGridSpec.from_dims(tuple(args.grid_dims), tuple(args.voxel_size))
    os.makedirs(args.out_dir, exist_ok=True)
    entries = []
    for i in range(args.n_scenes):
        scene_seed = args.seed + i
        scene = synth_scene(scene_seed, args.n_objects, grid=grid)
        stem = f"scene_{i:04d}"
        write_cloud(scene.cloud, os.path.join(args.out_dir, stem + ".bin"))
        write_labels(scene.boxes, os.path.join(args.out_dir, stem + ".json"))
        entries.append({"cloud": stem + ".bin", "labels": stem + ".json", "seed": scene_seed,
                        "n_points": len(scene.cloud), "n_objects": len(scene.boxes)})
    manifest = {"seed": args.seed, "n_scenes": args.n_scenes, "n_objects": args.n_objects,
                "grid": {"range_min": list(grid.range_min), "range_max": list(grid.range_max),
                         "voxel_size": list(grid.voxel_size)},
                "scenes": entries}
    with open(os.path.join(args.out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return EXIT_OK


def cmd_run(args) -> int:
    if not os.path.isfile(args.cloud):
        raise UsageError(f"file not found: {args.cloud}")
    cfg = _config(args, args.preset, args.spec)
    det = cfg.detector()
    cloud = load_cloud(args.cloud)
    dets, _ = heads.detect(det, cloud, cfg.grid, cfg.threads)
    _emit(heads.dumps_detections(dets), args.out)
    return EXIT_OK


def _bench_scene(args, grid):
    if args.scene is None:
        if args.labels is not None:
            raise UsageError("--labels requires --scene")
        scene = reference_scene(grid)
        return scene.cloud, scene.boxes
    if not os.path.isfile(args.scene):
        raise UsageError(f"file not found: {args.scene}")
    labels = None
    if args.labels is not None:
        if not os.path.isfile(args.labels):
            raise UsageError(f"file not found: {args.labels}")
        labels = read_labels(args.labels)
    return load_cloud(args.scene), labels


def cmd_bench(args) -> int:
    configs = []
    for name in args.preset or ([] if args.spec else ["A0"]):
        configs.append((name, _config(args, preset=name)))
    for path in args.spec or []:
        configs.append((path, _config(args, spec_file=path)))
    grid = configs[0][1].grid
    cloud, labels = _bench_scene(args, grid)
    rows, failures = [], []
    for name, cfg in configs:
        try:
            spec = cfg.spec()
            det = build(spec, cfg.seed)
            cost = costbench.profile_cost(spec, cfg.grid, cloud, det=det, workers=cfg.threads)
            lat = costbench.measure_latency(det, cloud, cfg.grid, args.warmup, args.runs, cfg.threads)
            ev = None
            if labels is not None:
                dets, _ = heads.detect(det, cloud, cfg.grid, cfg.threads)
                ev = metrics.evaluate(dets, labels, _eval_config(args))
            rows.append((spec.name if cfg.preset else name, cost, lat, ev))
        except (SpecError, costbench.BenchmarkError, ValueError, RuntimeError) as exc:
            failures.append(f"{name}: {exc}")
    for msg in failures:
        print(f"bench: {msg}", file=sys.stderr)
    if rows:
        _emit(costbench.report(rows, args.format, args.metric), args.out)
    return EXIT_RUNTIME if failures else EXIT_OK


def _eval_config(args) -> metrics.EvalConfig:
    thresholds = dict(metrics.DEFAULT_IOU)
    for cls in CLASSES:
        v = getattr(args, f"iou_{cls}", None)
        if v is not None:
            thresholds[cls] = v
    try:
        return metrics.EvalConfig(thresholds, getattr(args, "recall_points", 101))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args) -> int:
    if len(args.dets) != len(args.labels):
        raise UsageError(f"{len(args.dets)} detection files but {len(args.labels)} label files")
    for path in list(args.dets) + list(args.labels):
        if not os.path.isfile(path):
            raise UsageError(f"file not found: {path}")
    config = _eval_config(args)
    scenes = []
    for dpath, lpath in zip(args.dets, args.labels):
        try:
            dets = heads.read_detections(dpath)
            labels = read_labels(lpath)
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid JSON: {exc}") from None
        scenes.append((dets, labels))
    report = metrics.evaluate_corpus(scenes, config)
    _emit(report.to_json() if args.format == "json" else report.to_csv(), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scaled-second", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("presets", help="list preset architectures and their parameter counts")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_presets)

    p = sub.add_parser("synth", help="write a synthetic labeled corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-scenes", type=int, default=1)
    p.add_argument("--n-objects", type=int, default=12)
    p.add_argument("--grid-dims", nargs=3, type=int, default=(512, 512, 40))
    p.add_argument("--voxel-size", nargs=3, type=float, default=(0.1, 0.1, 0.15))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="detect objects in one point cloud file")
    _add_model_args(p)
    p.add_argument("--cloud", required=True, help="binary float32 (x, y, z, intensity) file")
    p.add_argument("--out", default=None, help="detections JSON (default stdout)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="cost profile and latency report for one or more models")
    _add_model_args(p, multi=True)
    p.add_argument("--scene", default=None, help="cloud file (default: the built-in reference scene)")
    p.add_argument("--labels", default=None, help="labels for --scene, enables metric columns")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--format", choices=costbench.FORMATS, default="csv")
    p.add_argument("--metric", default="mAPH", help="quality axis for the SVG scatter")
    p.add_argument("--out", default=None)
    _add_eval_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="AP / APH of detection files against label files")
    p.add_argument("--dets", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--recall-points", type=int, default=101)
    p.add_argument("--out", default=None)
    _add_eval_args(p)
    p.set_defaults(func=cmd_eval)
    return parser


def _add_eval_args(p):
    for cls in CLASSES:
        p.add_argument(f"--iou-{cls}", type=float, default=None,
                       help=f"IoU threshold for {cls} (default {metrics.DEFAULT_IOU[cls]})")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, SpecError, WeightFileError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CloudFormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
