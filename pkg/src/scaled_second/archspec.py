"""Declarative detector architectures, named presets, and analytic cost counting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction

from .pointcloud import CLASSES

IN_CHANNELS = 4  # mean x, y, z, intensity
POST_UPSAMPLE = ("none", "bilinear2x")

DEFAULT_ANCHOR_SIZES = {
    "vehicle": (4.7, 2.1, 1.7),
    "pedestrian": (0.9, 0.9, 1.7),
    "cyclist": (1.8, 0.8, 1.7),
}
DEFAULT_ANCHOR_Z = {"vehicle": 0.0, "pedestrian": 0.0, "cyclist": 0.0}
CENTER_REGRESSION_CHANNELS = 8  # offset 2, z 1, log-size 3, sin/cos 2
BOX_CODE_SIZE = 7


class SpecError(ValueError):
    """Invalid or unknown architecture description."""


@dataclass(frozen=True)
class Stage3DSpec:
    depth: int
    width: int
    downsample: bool = False
    residual: bool = False


@dataclass(frozen=True)
class Stage2DSpec:
    depth: int
    width: int
    downsample: bool = False
    upsample_stride: int = 1
    residual: bool = False


@dataclass(frozen=True)
class HeadSpec:
    kind: str = "anchor"
    classes: tuple = CLASSES
    anchor_sizes: tuple = tuple(DEFAULT_ANCHOR_SIZES[c] for c in CLASSES)
    anchor_z: tuple = tuple(DEFAULT_ANCHOR_Z[c] for c in CLASSES)
    yaws: tuple = (0.0, math.pi / 2)
    score_threshold: float = 0.1
    nms_iou: float = 0.7
    pre_nms_top_k: int = 4096
    post_nms_top_k: int = 500

    @property
    def anchors_per_cell(self) -> int:
        return len(self.classes) * len(self.yaws)


@dataclass(frozen=True)
class DetectorSpec:
    name: str
    stages3d: tuple
    stages2d: tuple
    head: HeadSpec = field(default_factory=HeadSpec)
    post_upsample: str = "none"
    height_channels: int = 128
    grid_z: int = 40

    @property
    def downsample_3d(self) -> int:
        return sum(1 for s in self.stages3d if s.downsample)

    @property
    def label(self) -> str:
        return f"SECOND-{self.head.kind.capitalize()}-{self.name}"


# ---------------------------------------------------------------------------
# Presets

# name: (3D depths, 3D widths, 2D depths, 2D widths)
_TABLE = {
    "A0": ((2, 3, 3, 3), (16, 32, 64, 64), (6, 6), (128, 256)),
    "A0-deep": ((8, 12, 12, 12), (16, 32, 64, 64), (24, 24), (128, 256)),
    "A0-wide": ((2, 3, 3, 3), (32, 64, 128, 128), (6, 6), (256, 512)),
    "A0-d&w": ((3, 5, 5, 5), (28, 56, 112, 112), (9, 9), (224, 448)),
    "A1": ((2, 4, 4), (32, 64, 64), (6, 6), (128, 256)),
    "A2": ((3, 6, 6), (48, 96, 144), (12, 12), (128, 256)),
}

# Residual 2D stages use an even depth so every layer sits in a two-layer block.
_RES_2D_DEPTHS = {"A0-d&w": (8, 8)}

PRESET_NAMES = (
    "A0", "A0-deep", "A0-wide", "A0-d&w", "A1", "A2",
    "A0+Upsample", "A0+Upsample×2",
    "A0-deep_res", "A0-wide_res", "A0-d&w_res", "A1_res", "A2_res",
)
_ALIASES = {"A0+Upsamplex2": "A0+Upsample×2", "A0+Upsample_x2": "A0+Upsample×2"}
HEAD_KINDS = ("anchor", "center")


def preset(name: str, head: str = "anchor") -> DetectorSpec:
    """Return one of the named architectures with an anchor or center head."""
    canonical = _ALIASES.get(name, name)
    if canonical not in PRESET_NAMES:
        raise SpecError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    if head not in HEAD_KINDS:
        raise SpecError(f"unknown head kind {head!r}")
    residual = canonical.endswith("_res")
    base = canonical[:-4] if residual else canonical
    upsample = base.startswith("A0+Upsample")
    d3, w3, d2, w2 = _TABLE["A0" if upsample else base]
    if residual:
        d2 = _RES_2D_DEPTHS.get(base, d2)
    stages3d = tuple(
        Stage3DSpec(d, w, downsample=i > 0, residual=residual)
        for i, (d, w) in enumerate(zip(d3, w3))
    )
    ups = (2, 4) if upsample else (1, 2)
    stages2d = tuple(
        Stage2DSpec(d, w, downsample=i > 0, upsample_stride=u, residual=residual)
        for i, (d, w, u) in enumerate(zip(d2, w2, ups))
    )
    post = "bilinear2x" if canonical == "A0+Upsample×2" else "none"
    return DetectorSpec(canonical, stages3d, stages2d, HeadSpec(kind=head), post)


def all_presets():
    for kind in HEAD_KINDS:
        for name in PRESET_NAMES:
            yield preset(name, kind)


# ---------------------------------------------------------------------------
# Validation


def validate(spec: DetectorSpec) -> list:
    """Every violated invariant as a message; an empty list means the spec is valid."""
    errs = []
    if not spec.stages3d:
        errs.append("at least one 3D stage is required")
    if not spec.stages2d:
        errs.append("at least one 2D stage is required")
    for i, s in enumerate(spec.stages3d):
        if s.depth < 1:
            errs.append(f"3D stage {i}: depth must be >= 1")
        if s.width < 1:
            errs.append(f"3D stage {i}: width must be >= 1")
    for i, s in enumerate(spec.stages2d):
        if s.depth < 1:
            errs.append(f"2D stage {i}: depth must be >= 1")
        if s.width < 1:
            errs.append(f"2D stage {i}: width must be >= 1")
        if s.upsample_stride < 1:
            errs.append(f"2D stage {i}: upsample_stride must be >= 1")
    if spec.stages3d and spec.stages3d[0].downsample:
        errs.append("first stage must not downsample (3D)")
    if spec.stages2d and spec.stages2d[0].downsample:
        errs.append("first stage must not downsample (2D)")
    if len(spec.stages2d) > 1 and not spec.stages2d[1].downsample:
        errs.append("second 2D stage must downsample")
    # every branch must land on the same resolution: upsample / cumulative downsample
    ratios = set()
    down = 1
    for s in spec.stages2d:
        if s.downsample:
            down *= 2
        if s.upsample_stride >= 1:
            ratios.add(s.upsample_stride / down)
    if len(ratios) > 1:
        errs.append("2D branches do not restore a common pre-head resolution")
    elif ratios and next(iter(ratios)) < 1:
        errs.append("2D branch resolution below the BEV input resolution")
    if spec.post_upsample not in POST_UPSAMPLE:
        errs.append(f"post_upsample must be one of {POST_UPSAMPLE}")
    if spec.height_channels < 0:
        errs.append("height_channels must be >= 0")
    if spec.grid_z < 1:
        errs.append("grid_z must be >= 1")
    elif spec.stages3d:
        factor = 2 ** spec.downsample_3d
        if spec.grid_z % factor:
            errs.append(f"grid_z {spec.grid_z} not divisible by 3D downsample factor {factor}")
        elif spec.height_channels and spec.grid_z // factor < 3:
            errs.append("height compression needs at least 3 voxels along z after the 3D backbone")
    h = spec.head
    if h.kind not in HEAD_KINDS:
        errs.append(f"head kind must be one of {HEAD_KINDS}")
    if not h.classes:
        errs.append("head classes must be non-empty")
    for nm in ("score_threshold", "nms_iou"):
        v = getattr(h, nm)
        if not 0.0 <= v <= 1.0:
            errs.append(f"head {nm} must lie in [0, 1]")
    if h.pre_nms_top_k < 1 or h.post_nms_top_k < 1:
        errs.append("head top-k limits must be >= 1")
    if h.kind == "anchor":
        if len(h.anchor_sizes) != len(h.classes) or len(h.anchor_z) != len(h.classes):
            errs.append("anchor sizes and z-centers must be given per class")
        elif any(min(sz) <= 0 for sz in h.anchor_sizes):
            errs.append("anchor sizes must be positive")
        if not h.yaws:
            errs.append("anchor yaw set must be non-empty")
    return errs


def check(spec: DetectorSpec) -> DetectorSpec:
    errs = validate(spec)
    if errs:
        raise SpecError("; ".join(errs))
    return spec


# ---------------------------------------------------------------------------
# Shapes


def _z_after_backbone(spec: DetectorSpec) -> int:
    return spec.grid_z // 2 ** spec.downsample_3d


def bev_geometry(spec: DetectorSpec):
    """(channels, z_extent) of the sparse volume that is flattened to BEV."""
    z = _z_after_backbone(spec)
    if spec.height_channels:
        return spec.height_channels, (z - 3) // 2 + 1
    return spec.stages3d[-1].width, z


def bev_channels(spec: DetectorSpec) -> int:
    c, z = bev_geometry(spec)
    return c * z


def pre_head_channels(spec: DetectorSpec) -> int:
    return sum(s.width for s in spec.stages2d)


def total_downsample(spec: DetectorSpec) -> int:
    return 2 ** (spec.downsample_3d + sum(1 for s in spec.stages2d if s.downsample))


def pre_head_factor(spec: DetectorSpec) -> Fraction:
    """Grid size divided by pre-head size along x (and y)."""
    post = 2 if spec.post_upsample == "bilinear2x" else 1
    return Fraction(2 ** spec.downsample_3d, spec.stages2d[0].upsample_stride * post)


def pre_head_resolution(spec: DetectorSpec, grid) -> tuple:
    """(W, H) of the map handed to the detection head for a voxel grid."""
    X, Y, _ = grid.dims if hasattr(grid, "dims") else grid
    factor = total_downsample(spec)
    if X % factor or Y % factor:
        raise SpecError(f"grid {X}x{Y} not divisible by total downsample factor {factor}")
    base = 2 ** spec.downsample_3d
    up = spec.stages2d[0].upsample_stride
    post = 2 if spec.post_upsample == "bilinear2x" else 1
    return (X // base * up * post, Y // base * up * post)


# ---------------------------------------------------------------------------
# Layer plan (shared by the network builder and the FLOP counter)


@dataclass(frozen=True)
class LayerDesc:
    name: str
    part: str  # "3d", "height", "2d", "branch", "head"
    mode: str  # submanifold | strided | dense | transposed
    kernel: tuple  # weight spatial shape: (kz, ky, kx) or (kh, kw)
    stride: tuple  # (x, y, z) or (h, w)
    padding: tuple
    cin: int
    cout: int
    norm: bool = True
    activation: str = "relu"
    block: int | None = None  # residual block id
    block_role: str = ""  # "first" | "second" | "proj"

    @property
    def kernel_volume(self) -> int:
        return math.prod(self.kernel)

    @property
    def num_params(self) -> int:
        return self.kernel_volume * self.cin * self.cout + self.cout + (2 * self.cout if self.norm else 0)


def _residual_pairs(depth: int, downsample: bool):
    start = 1 if downsample else 0
    return [(j, j + 1) for j in range(start, depth - 1, 2)]


def layer_plan(spec: DetectorSpec) -> list:
    layers = []
    block_id = 0
    cin = IN_CHANNELS
    for i, st in enumerate(spec.stages3d):
        pairs = dict(_residual_pairs(st.depth, st.downsample)) if st.residual else {}
        seconds = set(pairs.values())
        for j in range(st.depth):
            strided = j == 0 and st.downsample
            mode = "strided" if strided else "submanifold"
            kw = dict(kernel=(3, 3, 3), stride=(2, 2, 2) if strided else (1, 1, 1),
                      padding=(1, 1, 1))
            if j in pairs:
                if cin != st.width:
                    layers.append(LayerDesc(f"conv3d.{i}.{j}.proj", "3d", "submanifold", (1, 1, 1),
                                            (1, 1, 1), (0, 0, 0), cin, st.width,
                                            activation="none", block=block_id, block_role="proj"))
                layers.append(LayerDesc(f"conv3d.{i}.{j}", "3d", mode, cin=cin, cout=st.width,
                                        block=block_id, block_role="first", **kw))
            elif j in seconds:
                layers.append(LayerDesc(f"conv3d.{i}.{j}", "3d", mode, cin=cin, cout=st.width,
                                        block=block_id, block_role="second", **kw))
                block_id += 1
            else:
                layers.append(LayerDesc(f"conv3d.{i}.{j}", "3d", mode, cin=cin, cout=st.width, **kw))
            cin = st.width
    if spec.height_channels:
        layers.append(LayerDesc("height", "height", "strided", (3, 1, 1), (1, 1, 2), (0, 0, 0),
                                cin, spec.height_channels))
    cin = bev_channels(spec)
    for i, st in enumerate(spec.stages2d):
        pairs = dict(_residual_pairs(st.depth, st.downsample)) if st.residual else {}
        seconds = set(pairs.values())
        for j in range(st.depth):
            strided = j == 0 and st.downsample
            kw = dict(kernel=(3, 3), stride=(2, 2) if strided else (1, 1), padding=(1, 1))
            if j in pairs:
                if cin != st.width:
                    layers.append(LayerDesc(f"conv2d.{i}.{j}.proj", "2d", "dense", (1, 1), (1, 1),
                                            (0, 0), cin, st.width, activation="none",
                                            block=block_id, block_role="proj"))
                layers.append(LayerDesc(f"conv2d.{i}.{j}", "2d", "dense", cin=cin, cout=st.width,
                                        block=block_id, block_role="first", **kw))
            elif j in seconds:
                layers.append(LayerDesc(f"conv2d.{i}.{j}", "2d", "dense", cin=cin, cout=st.width,
                                        block=block_id, block_role="second", **kw))
                block_id += 1
            else:
                layers.append(LayerDesc(f"conv2d.{i}.{j}", "2d", "dense", cin=cin, cout=st.width, **kw))
            cin = st.width
        u = st.upsample_stride
        if u == 1:
            layers.append(LayerDesc(f"branch.{i}", "branch", "dense", (1, 1), (1, 1), (0, 0),
                                    st.width, st.width, activation="none"))
        else:
            layers.append(LayerDesc(f"branch.{i}", "branch", "transposed", (u, u), (u, u), (0, 0),
                                    st.width, st.width, activation="none"))
    c = pre_head_channels(spec)
    h = spec.head
    k = len(h.classes)
    if h.kind == "anchor":
        outs = [("head.cls", h.anchors_per_cell * k), ("head.box", h.anchors_per_cell * BOX_CODE_SIZE)]
    else:
        outs = [("head.heatmap", k), ("head.reg", CENTER_REGRESSION_CHANNELS)]
    for nm, co in outs:
        layers.append(LayerDesc(nm, "head", "dense", (1, 1), (1, 1), (0, 0), c, co,
                                norm=False, activation="none"))
    return layers


# ---------------------------------------------------------------------------
# Cost counting


def count_params(spec: DetectorSpec) -> int:
    """Closed-form parameter total: k*Cin*Cout + Cout (bias) + 2*Cout (norm) per normalized layer."""

    def conv(kvol, cin, cout, norm=True):
        return kvol * cin * cout + cout + (2 * cout if norm else 0)

    total = 0
    cin = IN_CHANNELS
    for st in spec.stages3d:
        total += conv(27, cin, st.width) + (st.depth - 1) * conv(27, st.width, st.width)
        if st.residual and not st.downsample and st.depth >= 2 and cin != st.width:
            total += conv(1, cin, st.width)
        cin = st.width
    if spec.height_channels:
        total += conv(3, cin, spec.height_channels)
    cin = bev_channels(spec)
    for st in spec.stages2d:
        total += conv(9, cin, st.width) + (st.depth - 1) * conv(9, st.width, st.width)
        if st.residual and not st.downsample and st.depth >= 2 and cin != st.width:
            total += conv(1, cin, st.width)
        total += conv(st.upsample_stride ** 2, st.width, st.width)
        cin = st.width
    c = pre_head_channels(spec)
    k = len(spec.head.classes)
    if spec.head.kind == "anchor":
        a = spec.head.anchors_per_cell
        total += conv(1, c, a * k, norm=False) + conv(1, c, a * BOX_CODE_SIZE, norm=False)
    else:
        total += conv(1, c, k, norm=False) + conv(1, c, CENTER_REGRESSION_CHANNELS, norm=False)
    return total


def _check_grid(spec: DetectorSpec, grid) -> tuple:
    dims = tuple(grid.dims if hasattr(grid, "dims") else grid)
    if dims[2] != spec.grid_z:
        raise SpecError(f"grid has {dims[2]} voxels along z, spec is built for {spec.grid_z}")
    factor = 2 ** spec.downsample_3d
    if any(d % factor for d in dims):
        raise SpecError(f"grid {dims} not divisible by 3D downsample factor {factor}")
    pre_head_resolution(spec, dims)
    return dims


def layer_shapes(spec: DetectorSpec, grid) -> list:
    """(LayerDesc, input spatial dims, output spatial dims) for every layer on a grid."""
    X, Y, Z = _check_grid(spec, grid)
    out = []
    cur3 = (Z, Y, X)
    cur2 = None
    stage_in = None
    for ld in layer_plan(spec):
        if ld.part in ("3d", "height"):
            kz, ky, kx = ld.kernel
            sx, sy, sz = ld.stride
            px, py, pz = ld.padding
            if ld.mode == "submanifold":
                new = cur3
            else:
                new = ((cur3[0] + 2 * pz - kz) // sz + 1, (cur3[1] + 2 * py - ky) // sy + 1,
                       (cur3[2] + 2 * px - kx) // sx + 1)
            out.append((ld, cur3, new))
            cur3 = new
            continue
        if cur2 is None:
            cur2 = cur3[1:]
        if ld.part == "2d":
            if ld.block_role == "proj":
                out.append((ld, cur2, cur2))
                continue
            s = ld.stride[0]
            new = ((cur2[0] + 2 - 3) // s + 1, (cur2[1] + 2 - 3) // s + 1)
            out.append((ld, cur2, new))
            cur2 = new
            stage_in = cur2
        elif ld.part == "branch":
            u = ld.stride[0] if ld.mode == "transposed" else 1
            out.append((ld, stage_in, (stage_in[0] * u, stage_in[1] * u)))
        else:
            H, W = pre_head_resolution(spec, (X, Y, Z))[::-1]
            out.append((ld, (H, W), (H, W)))
    return out


def layer_macs(ld: LayerDesc, out_dims) -> int:
    """Dense-equivalent multiply-accumulates: kernel volume * Cin * Cout per output site."""
    sites = math.prod(out_dims)
    if ld.mode == "transposed":
        return sites * ld.cin * ld.cout
    return sites * ld.kernel_volume * ld.cin * ld.cout


def count_flops_dense(spec: DetectorSpec, grid, parts=None) -> int:
    """2 * MACs summed over layers, treating sparse 3D layers as dense."""
    total = 0
    for ld, _, out_dims in layer_shapes(spec, grid):
        if parts is None or ld.part in parts:
            total += 2 * layer_macs(ld, out_dims)
    return total


# ---------------------------------------------------------------------------
# JSON


def to_dict(spec: DetectorSpec) -> dict:
    d = asdict(spec)
    d["stages3d"] = [asdict(s) for s in spec.stages3d]
    d["stages2d"] = [asdict(s) for s in spec.stages2d]
    h = d["head"]
    h["classes"] = list(spec.head.classes)
    h["anchor_sizes"] = [list(s) for s in spec.head.anchor_sizes]
    h["anchor_z"] = list(spec.head.anchor_z)
    h["yaws"] = list(spec.head.yaws)
    return d


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise SpecError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise SpecError(f"{where}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise SpecError(f"{where}: {exc}") from None


def from_dict(data: dict) -> DetectorSpec:
    if not isinstance(data, dict):
        raise SpecError("spec: expected an object")
    data = dict(data)
    head = dict(data.get("head", {}))
    for key in ("classes", "anchor_z", "yaws"):
        if key in head:
            head[key] = tuple(head[key])
    if "anchor_sizes" in head:
        head["anchor_sizes"] = tuple(tuple(s) for s in head["anchor_sizes"])
    if "head" in data:
        data["head"] = _build(HeadSpec, head, "head")
    data["stages3d"] = tuple(_build(Stage3DSpec, s, f"stages3d[{i}]")
                             for i, s in enumerate(data.get("stages3d", [])))
    data["stages2d"] = tuple(_build(Stage2DSpec, s, f"stages2d[{i}]")
                             for i, s in enumerate(data.get("stages2d", [])))
    return _build(DetectorSpec, data, "spec")


def dumps(spec: DetectorSpec) -> str:
    return json.dumps(to_dict(spec), indent=2, ensure_ascii=False)


def loads(text: str) -> DetectorSpec:
    return from_dict(json.loads(text))


def with_head(spec: DetectorSpec, **changes) -> DetectorSpec:
    return replace(spec, head=replace(spec.head, **changes))
