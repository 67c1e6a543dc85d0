"""Instantiate a DetectorSpec with deterministic weights and run the backbone forward pass."""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import archspec
from .archspec import DetectorSpec, LayerDesc, SpecError
from .kernels import (
    ConvParams,
    SparseTensor3D,
    bilinear_upsample2x,
    conv2d,
    sparse_conv3d_with_pairs,
    transposed_conv2d,
)
from .pointcloud import PointCloud, VoxelGridSpec, VoxelSet, voxelize
from .rng import uniform_weights

WEIGHTS_FORMAT = "scaled-second-weights/1"


class WeightFileError(ValueError):
    """Weight file does not match the requested spec or is damaged."""


@dataclass(frozen=True, eq=False)
class Layer:
    desc: LayerDesc
    params: ConvParams

    @property
    def name(self) -> str:
        return self.desc.name


@dataclass(frozen=True, eq=False)
class Detector:
    spec: DetectorSpec
    layers: tuple
    weight_seed: int

    def _part(self, *parts):
        return tuple(layer for layer in self.layers if layer.desc.part in parts)

    @property
    def layers3d(self):
        return self._part("3d", "height")

    @property
    def layers2d(self):
        return self._part("2d")

    @property
    def branch_transforms(self):
        return self._part("branch")

    @property
    def head_layers(self):
        return self._part("head")

    @property
    def num_params(self) -> int:
        return sum(layer.params.num_params for layer in self.layers)

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


@dataclass(frozen=True, eq=False)
class PreHeadFeatures:
    map: np.ndarray  # C x H x W
    metric_transform: tuple  # (x_min, y_min, cell_size_x, cell_size_y)

    @property
    def resolution(self) -> tuple:
        """(W, H)"""
        return (self.map.shape[2], self.map.shape[1])


@dataclass
class LayerRecord:
    name: str
    kind: str
    in_dims: tuple
    out_dims: tuple
    active_in: int | None
    active_out: int | None
    macs: int
    wall_ns: int


@dataclass
class ForwardTrace:
    layers: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)  # stage name -> wall ns
    active_voxels: int = 0

    def macs(self, kinds=None) -> int:
        return sum(r.macs for r in self.layers if kinds is None or r.kind in kinds)

    @property
    def sparse_macs(self) -> int:
        return self.macs(("sparse",))

    @property
    def dense_macs(self) -> int:
        return self.macs(("dense", "transposed"))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.layers)


# ---------------------------------------------------------------------------
# Build


def _fan_in(ld: LayerDesc) -> int:
    if ld.mode == "transposed":
        return ld.cin
    return ld.kernel_volume * ld.cin


def _make_params(ld: LayerDesc, weights, bias, norm) -> ConvParams:
    act = "none" if ld.block_role == "second" else ld.activation
    return ConvParams(weights, ld.mode, ld.stride, ld.padding, bias=bias, norm=norm, activation=act)


def build(spec: DetectorSpec, seed: int) -> Detector:
    """Weights ~ U[-1/sqrt(fan_in), 1/sqrt(fan_in)] from per-layer substreams; zero bias, identity norm."""
    archspec.check(spec)
    if not 0 <= int(seed) < 2 ** 64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    layers = []
    for k, ld in enumerate(archspec.layer_plan(spec)):
        shape = tuple(ld.kernel) + (ld.cin, ld.cout)
        w = uniform_weights(seed, k, shape, 1.0 / math.sqrt(_fan_in(ld)))
        bias = np.zeros(ld.cout, np.float32)
        norm = (np.ones(ld.cout, np.float32), np.zeros(ld.cout, np.float32)) if ld.norm else None
        layers.append(Layer(ld, _make_params(ld, w, bias, norm)))
    return Detector(spec, tuple(layers), int(seed))


# ---------------------------------------------------------------------------
# Forward


def _check_voxels(det: Detector, grid: VoxelGridSpec):
    X, Y, Z = grid.dims
    if Z != det.spec.grid_z:
        raise SpecError(f"grid has {Z} voxels along z, detector is built for {det.spec.grid_z}")
    factor = 2 ** det.spec.downsample_3d
    if X % factor or Y % factor or Z % factor:
        raise SpecError(f"grid dims {(X, Y, Z)} not divisible by 3D downsample factor {factor}")


def _timed(trace, name, kind, fn, in_dims, active_in=None):
    t0 = time.perf_counter_ns()
    out, macs, out_dims, active_out = fn()
    if trace is not None:
        trace.layers.append(LayerRecord(name, kind, tuple(in_dims), tuple(out_dims), active_in,
                                        active_out, int(macs), time.perf_counter_ns() - t0))
    return out


def _sparse_layer(layer: Layer, x: SparseTensor3D, workers, trace):
    p = layer.params

    def run():
        y, pairs = sparse_conv3d_with_pairs(x, p, workers)
        return y, pairs * p.in_channels * p.out_channels, y.dims, len(y)

    return _timed(trace, layer.name, "sparse", run, x.dims, len(x))


def _run_sparse_layers(layers, x, workers, trace):
    skip = None
    for layer in layers:
        role = layer.desc.block_role
        if role == "proj":
            skip = _sparse_layer(layer, x, workers, trace)
            continue
        if role == "first":
            if skip is None:
                skip = x
            x = _sparse_layer(layer, x, workers, trace)
        elif role == "second":
            y = _sparse_layer(layer, x, workers, trace)
            x = SparseTensor3D(y.dims, y.coords, np.maximum(y.features + skip.features, 0))
            skip = None
        else:
            x = _sparse_layer(layer, x, workers, trace)
    return x


def forward_3d(det: Detector, voxels: VoxelSet, workers: int = 1, trace=None) -> SparseTensor3D:
    """3D sparse backbone. Output dims are the grid dims halved once per downsampling stage."""
    _check_voxels(det, voxels.grid)
    x = SparseTensor3D.from_voxels(voxels)
    return _run_sparse_layers(det._part("3d"), x, workers, trace)


def compress_height(det: Detector, x: SparseTensor3D, workers: int = 1, trace=None) -> SparseTensor3D:
    """Strided z-only sparse conv applied before flattening (identity when disabled)."""
    layers = det._part("height")
    return _run_sparse_layers(layers, x, workers, trace) if layers else x


def bev_project(x: SparseTensor3D) -> np.ndarray:
    """Flatten z into channels: out[z * C + c, y, x] = feature c of active site (x, y, z)."""
    X, Y, Z = x.dims
    C = x.channels
    out = np.zeros((Z * C, Y, X), np.float32)
    if len(x):
        ix, iy, iz = x.coords[:, 0], x.coords[:, 1], x.coords[:, 2]
        ch = iz[:, None] * C + np.arange(C)[None, :]
        out[ch, iy[:, None], ix[:, None]] = x.features
    return out


def _dense_layer(layer: Layer, x: np.ndarray, workers, trace):
    p = layer.params

    def run():
        if p.mode == "transposed":
            y = transposed_conv2d(x, p, workers)
            macs = y.shape[1] * y.shape[2] * p.in_channels * p.out_channels
        else:
            y = conv2d(x, p, workers)
            macs = y.shape[1] * y.shape[2] * p.kernel_volume * p.in_channels * p.out_channels
        return y, macs, y.shape[1:], None

    kind = "transposed" if p.mode == "transposed" else "dense"
    return _timed(trace, layer.name, kind, run, x.shape[1:])


def metric_transform(spec: DetectorSpec, grid: VoxelGridSpec) -> tuple:
    W, H = archspec.pre_head_resolution(spec, grid)
    X, Y, _ = grid.dims
    return (grid.range_min[0], grid.range_min[1],
            grid.voxel_size[0] * X / W, grid.voxel_size[1] * Y / H)


def forward_2d(det: Detector, bev: np.ndarray, grid: VoxelGridSpec | None = None,
               workers: int = 1, trace=None) -> PreHeadFeatures:
    """2D stages, per-stage branch transforms, channel concat, optional bilinear 2x."""
    spec = det.spec
    expected = archspec.bev_channels(spec)
    if bev.shape[0] != expected:
        raise SpecError(f"BEV map has {bev.shape[0]} channels, detector expects {expected}")
    x = bev
    branches = []
    skip = None
    stage_layers = {}
    for layer in det._part("2d", "branch"):
        stage_layers.setdefault(int(layer.name.split(".")[1]), []).append(layer)
    for i in sorted(stage_layers):
        for layer in stage_layers[i]:
            role = layer.desc.block_role
            if layer.desc.part == "branch":
                branches.append(_dense_layer(layer, x, workers, trace))
            elif role == "proj":
                skip = _dense_layer(layer, x, workers, trace)
            elif role == "first":
                if skip is None:
                    skip = x
                x = _dense_layer(layer, x, workers, trace)
            elif role == "second":
                y = _dense_layer(layer, x, workers, trace)
                x = np.maximum(y + skip, 0)
                skip = None
            else:
                x = _dense_layer(layer, x, workers, trace)
    shapes = {b.shape[1:] for b in branches}
    if len(shapes) != 1:
        raise SpecError(f"branch outputs disagree on resolution: {sorted(shapes)}")
    out = np.concatenate(branches, axis=0)
    if spec.post_upsample == "bilinear2x":
        t0 = time.perf_counter_ns()
        in_dims = out.shape[1:]
        out = bilinear_upsample2x(out)
        if trace is not None:
            trace.layers.append(LayerRecord("post_upsample", "bilinear", in_dims, out.shape[1:],
                                            None, None, 0, time.perf_counter_ns() - t0))
    if grid is not None:
        mt = metric_transform(spec, grid)
    else:
        mt = (0.0, 0.0, 1.0, 1.0)
    return PreHeadFeatures(out, mt)


def forward(det: Detector, cloud: PointCloud, grid: VoxelGridSpec, workers: int = 1):
    """voxelize -> 3D backbone -> height compression -> BEV -> 2D backbone, with a per-layer trace."""
    trace = ForwardTrace()
    _check_voxels(det, grid)
    archspec.pre_head_resolution(det.spec, grid)

    t0 = time.perf_counter_ns()
    voxels = voxelize(cloud, grid)
    trace.active_voxels = len(voxels)
    t1 = time.perf_counter_ns()
    x = forward_3d(det, voxels, workers, trace)
    t2 = time.perf_counter_ns()
    x = compress_height(det, x, workers, trace)
    bev = bev_project(x)
    t3 = time.perf_counter_ns()
    feats = forward_2d(det, bev, grid, workers, trace)
    t4 = time.perf_counter_ns()
    trace.stages.update(voxelize=t1 - t0, backbone_3d=t2 - t1, bev=t3 - t2, backbone_2d=t4 - t3)
    return feats, trace


# ---------------------------------------------------------------------------
# Weight files


def _manifest_path(path) -> str:
    return os.fspath(path) + ".json"


def save_weights(det: Detector, path) -> None:
    """Write little-endian float32 arrays to ``path`` and a JSON manifest to ``path + '.json'``."""
    entries = []
    offset = 0
    with open(path, "wb") as fh:
        for layer in det.layers:
            for key, arr in layer.params.arrays().items():
                data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                entries.append({"name": layer.name, "array": key, "shape": list(arr.shape),
                                "offset": offset, "nbytes": len(data)})
                fh.write(data)
                offset += len(data)
    manifest = {"format": WEIGHTS_FORMAT, "seed": det.weight_seed,
                "spec": archspec.to_dict(det.spec), "layers": entries}
    with open(_manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=1, ensure_ascii=False)
        fh.write("\n")


def load_weights(spec: DetectorSpec, path) -> Detector:
    archspec.check(spec)
    with open(_manifest_path(path)) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != WEIGHTS_FORMAT:
        raise WeightFileError(f"unsupported weight file format {manifest.get('format')!r}")
    raw = open(path, "rb").read()
    by_layer = {}
    for e in manifest["layers"]:
        by_layer.setdefault(e["name"], {})[e["array"]] = e
    file_order = list(by_layer)
    plan = archspec.layer_plan(spec)
    for i, ld in enumerate(plan):
        if i >= len(file_order) or file_order[i] != ld.name:
            got = file_order[i] if i < len(file_order) else "<missing>"
            raise WeightFileError(f"layer {i} mismatch: spec expects {ld.name!r}, file has {got!r}")
    if len(file_order) != len(plan):
        raise WeightFileError(f"layer {len(plan)} mismatch: file has extra layer {file_order[len(plan)]!r}")

    layers = []
    for ld in plan:
        arrays = {}
        for key, e in by_layer[ld.name].items():
            end = e["offset"] + e["nbytes"]
            if end > len(raw):
                raise WeightFileError(f"weight file truncated inside layer {ld.name!r} ({key})")
            arrays[key] = np.frombuffer(raw[e["offset"]:end], dtype="<f4").astype(np.float32).reshape(e["shape"])
        shape = tuple(ld.kernel) + (ld.cin, ld.cout)
        if "weights" not in arrays or arrays["weights"].shape != shape:
            got = arrays["weights"].shape if "weights" in arrays else None
            raise WeightFileError(f"layer {ld.name!r} mismatch: expected weights {shape}, file has {got}")
        norm = None
        if ld.norm:
            if "norm_scale" not in arrays:
                raise WeightFileError(f"layer {ld.name!r} mismatch: missing norm parameters")
            norm = (arrays["norm_scale"], arrays["norm_shift"])
        layers.append(Layer(ld, _make_params(ld, arrays["weights"], arrays.get("bias"), norm)))
    return Detector(spec, tuple(layers), int(manifest.get("seed", 0)))
