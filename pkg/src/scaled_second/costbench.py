"""Latency protocol, cost profiles, Pareto fronts and CSV/JSON/SVG reports.

Latency is always measured at batch size 1, one benchmark at a time
(a process-wide lock serializes measurements). Median is the headline number.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import threading
import time
from dataclasses import asdict, dataclass
from xml.sax.saxutils import escape

import numpy as np

from . import __version__, archspec
from .archspec import DetectorSpec
from .heads import detect
from .network import Detector, build, forward
from .pointcloud import PointCloud, VoxelGridSpec

STAGES = ("voxelize", "backbone_3d", "bev", "backbone_2d", "head", "nms")
CSV_FIELDS = ("label", "params", "dense_flops", "sparse_macs", "latency_median_ms", "latency_p95_ms")
FORMATS = ("csv", "json", "svg")

MEASUREMENT_LOCK = threading.Lock()


class BenchmarkError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvDescriptor:
    host: str
    threads: int
    version: str
    python: str
    numpy: str
    machine: str
    cpu_count: int

    @classmethod
    def current(cls, threads: int) -> "EnvDescriptor":
        return cls(platform.node(), int(threads), __version__, platform.python_version(),
                   np.__version__, platform.machine(), os.cpu_count() or 1)


def _median(values) -> float:
    return float(np.median(np.asarray(values, np.float64))) if len(values) else float("nan")


@dataclass(frozen=True)
class LatencyReport:
    warmup_runs: int
    measured_runs: int
    runs_ms: tuple
    median_ms: float
    mean_ms: float
    p95_ms: float
    stage_medians_ms: dict
    env: EnvDescriptor | None = None
    batch_size: int = 1

    @classmethod
    def from_samples(cls, runs_ms, warmup_runs: int = 0, stage_samples=None, env=None) -> "LatencyReport":
        """Statistics over per-run milliseconds. p95 uses linear interpolation between order statistics."""
        runs = tuple(float(v) for v in runs_ms)
        if not runs:
            raise ValueError("at least one measured run is required")
        arr = np.asarray(runs, np.float64)
        stage_samples = stage_samples or {}
        stages = {k: _median(v) for k, v in stage_samples.items()}
        return cls(int(warmup_runs), len(runs), runs, float(np.median(arr)), float(arr.mean()),
                   float(np.percentile(arr, 95)), stages, env)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["runs_ms"] = list(self.runs_ms)
        return d


_TIMER_OVERHEAD_NS = None


def timer_overhead_ns() -> int:
    """Smallest observed gap between back-to-back clock reads (calibrated once)."""
    global _TIMER_OVERHEAD_NS
    if _TIMER_OVERHEAD_NS is None:
        best = min(-(time.perf_counter_ns() - time.perf_counter_ns()) for _ in range(2000))
        _TIMER_OVERHEAD_NS = max(int(best), 0)
    return _TIMER_OVERHEAD_NS


def measure_latency(det: Detector, cloud: PointCloud, grid: VoxelGridSpec, warmup: int = 10,
                    runs: int = 50, workers: int = 1) -> LatencyReport:
    """End-to-end (voxelize through NMS) wall-clock latency at batch size 1."""
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    overhead = timer_overhead_ns()
    overhead = overhead if overhead > 1000 else 0
    samples, stages = [], {k: [] for k in STAGES}
    with MEASUREMENT_LOCK:
        for i in range(warmup + runs):
            t0 = time.perf_counter_ns()
            try:
                _, trace = detect(det, cloud, grid, workers)
            except Exception as exc:
                what = f"warmup run {i}" if i < warmup else f"run {i - warmup}"
                raise BenchmarkError(f"{what} failed: {exc}") from exc
            elapsed = time.perf_counter_ns() - t0 - overhead
            if i < warmup:
                continue
            samples.append(elapsed / 1e6)
            for k in STAGES:
                stages[k].append(trace.stages.get(k, 0) / 1e6)
    return LatencyReport.from_samples(samples, warmup, stages, EnvDescriptor.current(workers))


# ---------------------------------------------------------------------------
# Cost profiles


@dataclass(frozen=True)
class CostProfile:
    params: int
    dense_flops: int
    sparse_macs: int
    activation_bytes: int  # inference activation estimate, not a training memory figure

    def to_dict(self) -> dict:
        return asdict(self)


def _activation_bytes(det: Detector, trace, grid) -> int:
    best = 0
    for rec in trace.layers:
        if rec.kind == "bilinear":
            c = archspec.pre_head_channels(det.spec)
            n_in, n_out = c * math.prod(rec.in_dims), c * math.prod(rec.out_dims)
        else:
            d = det.layer(rec.name).desc
            if rec.kind == "sparse":
                n_in, n_out = rec.active_in * d.cin, rec.active_out * d.cout
            else:
                n_in, n_out = math.prod(rec.in_dims) * d.cin, math.prod(rec.out_dims) * d.cout
        best = max(best, 4 * (n_in + n_out))
    for ld, in_dims, out_dims in archspec.layer_shapes(det.spec, grid):
        if ld.part == "head":
            best = max(best, 4 * (math.prod(in_dims) * ld.cin + math.prod(out_dims) * ld.cout))
    return best


def profile_cost(spec: DetectorSpec, grid: VoxelGridSpec, sample: PointCloud, seed: int = 0,
                 workers: int = 1, det: Detector | None = None) -> CostProfile:
    """Analytic params and dense FLOPs plus sparse MACs measured by one traced forward."""
    archspec.check(spec)
    det = det if det is not None else build(spec, seed)
    _, trace = forward(det, sample, grid, workers)
    return CostProfile(
        params=archspec.count_params(spec),
        dense_flops=archspec.count_flops_dense(spec, grid),
        sparse_macs=trace.sparse_macs,
        activation_bytes=_activation_bytes(det, trace, grid),
    )


# ---------------------------------------------------------------------------
# Pareto front


@dataclass(frozen=True)
class ParetoPoint:
    label: str
    cost: float  # milliseconds
    quality: float

    def __post_init__(self):
        if not (math.isfinite(self.cost) and self.cost > 0):
            raise ValueError(f"{self.label}: cost must be finite and > 0, got {self.cost}")
        if not math.isfinite(self.quality):
            raise ValueError(f"{self.label}: quality must be finite, got {self.quality}")


def pareto(points) -> list:
    """Points not dominated by any other (cost <= and quality >=, one strict), in input order."""
    points = list(points)
    if not points:
        return []
    cost = np.array([p.cost for p in points], np.float64)
    qual = np.array([p.quality for p in points], np.float64)
    order = np.lexsort((-qual, cost))
    keep = np.zeros(len(points), bool)
    best_cheaper = -math.inf
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and cost[order[j]] == cost[order[i]]:
            j += 1
        group = order[i:j]
        top = qual[group[0]]
        if top > best_cheaper:
            keep[group[qual[group] == top]] = True
        best_cheaper = max(best_cheaper, top)
        i = j
    return [p for p, k in zip(points, keep) if k]


# ---------------------------------------------------------------------------
# Reports


def _metric_columns(rows) -> list:
    names = []
    for row in rows:
        ev = row[3] if len(row) > 3 else None
        if ev is not None:
            for k in ev.metric_columns():
                if k not in names:
                    names.append(k)
    return names


def _num(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def report_csv(rows) -> str:
    metrics = _metric_columns(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(CSV_FIELDS) + metrics)
    for row in rows:
        label, cost, lat = row[:3]
        ev = row[3] if len(row) > 3 else None
        cols = ev.metric_columns() if ev is not None else {}
        w.writerow([label, _num(cost.params), _num(cost.dense_flops), _num(cost.sparse_macs),
                    _num(lat.median_ms), _num(lat.p95_ms)]
                   + [_num(cols[m]) if m in cols else "" for m in metrics])
    return buf.getvalue()


def report_json(rows) -> str:
    doc = []
    for row in rows:
        label, cost, lat = row[:3]
        ev = row[3] if len(row) > 3 else None
        doc.append({"label": label, "cost": cost.to_dict(), "latency": lat.to_dict(),
                    "eval": ev.to_dict() if ev is not None else None})
    return json.dumps(doc, indent=1) + "\n"


def _quality(row, metric: str) -> float:
    ev = row[3] if len(row) > 3 else None
    if ev is None:
        return 0.0
    return float(ev.metric_columns().get(metric, 0.0))


def report_svg(rows, metric: str = "mAPH") -> str:
    """Latency-vs-quality scatter, 800x600 viewBox, with the Pareto frontier as a polyline."""
    W, H, L, R, T, B = 800, 600, 80, 30, 30, 70
    pts = [ParetoPoint(row[0], max(row[2].median_ms, 1e-9), _quality(row, metric)) for row in rows]
    xs = [p.cost for p in pts]
    ys = [p.quality for p in pts]
    x_lo, x_hi = 0.0, max(xs) * 1.1
    y_lo, y_hi = min(0.0, min(ys)), max(1.0, max(ys))

    def sx(v):
        return L + (v - x_lo) / (x_hi - x_lo) * (W - L - R)

    def sy(v):
        return H - B - (v - y_lo) / (y_hi - y_lo) * (H - T - B)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" width="{W}" height="{H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line class="axis" x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
        f'<line class="axis" x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
        f'<text class="xlabel" x="{(L + W - R) / 2}" y="{H - 20}" text-anchor="middle">'
        f'median latency (ms)</text>',
        f'<text class="ylabel" x="20" y="{(T + H - B) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 20 {(T + H - B) / 2})">{escape(metric)} (unitless)</text>',
    ]
    for k in range(5):
        xv = x_lo + (x_hi - x_lo) * k / 4
        yv = y_lo + (y_hi - y_lo) * k / 4
        out.append(f'<text class="tick" x="{sx(xv):.1f}" y="{H - B + 18}" text-anchor="middle" '
                   f'font-size="11">{xv:.4g}</text>')
        out.append(f'<text class="tick" x="{L - 8}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
                   f'font-size="11">{yv:.3g}</text>')
    front = sorted(pareto(pts), key=lambda p: (p.cost, -p.quality))
    coords = " ".join(f"{sx(p.cost):.2f},{sy(p.quality):.2f}" for p in front)
    out.append(f'<polyline class="frontier" points="{coords}" fill="none" stroke="#c0392b" '
               f'stroke-width="1.5"/>')
    for p in pts:
        out.append(f'<circle class="marker" cx="{sx(p.cost):.2f}" cy="{sy(p.quality):.2f}" r="4" '
                   f'fill="#2c3e50"/>')
        out.append(f'<text class="point-label" x="{sx(p.cost) + 6:.2f}" y="{sy(p.quality) - 6:.2f}" '
                   f'font-size="11">{escape(p.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report(rows, format: str = "csv", metric: str = "mAPH") -> str:
    """rows: (label, CostProfile, LatencyReport[, EvalReport or None]) tuples."""
    rows = list(rows)
    if not rows:
        raise ValueError("report needs at least one row")
    if format == "csv":
        return report_csv(rows)
    if format == "json":
        return report_json(rows)
    if format == "svg":
        return report_svg(rows, metric)
    raise ValueError(f"unknown report format {format!r}; expected one of {FORMATS}")
