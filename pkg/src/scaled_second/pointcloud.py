"""Point clouds, voxel grids, oriented boxes and synthetic labeled scenes."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

CLASSES = ("vehicle", "pedestrian", "cyclist")

# (length, width, height) ranges in meters used by synth_scene.
CLASS_SIZE_RANGES = {
    "vehicle": ((4.0, 5.0), (1.8, 2.1), (1.5, 1.8)),
    "pedestrian": ((0.6, 1.0), (0.6, 1.0), (1.6, 1.9)),
    "cyclist": ((1.6, 2.0), (0.6, 0.9), (1.6, 1.9)),
}

RECORD_BYTES = 16
_RECORD_DTYPE = np.dtype("<f4")


class CloudFormatError(ValueError):
    """Raised for malformed point-cloud files."""


class PlacementError(RuntimeError):
    """Raised when synth_scene cannot place an object within its retry budget."""


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]. Works on scalars and arrays."""
    out = np.mod(np.asarray(theta, dtype=np.float64) + math.pi, 2.0 * math.pi) - math.pi
    out = np.where(out <= -math.pi, out + 2.0 * math.pi, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    intensity: float


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered (N, 4) float32 array of x, y, z, intensity."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.float32))

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 4)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __iter__(self):
        for row in self.points:
            yield Point(*(float(v) for v in row))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    @classmethod
    def from_points(cls, points: Sequence[Point]) -> "PointCloud":
        arr = np.array([(p.x, p.y, p.z, p.intensity) for p in points], dtype=np.float32)
        return cls(arr.reshape(-1, 4))


@dataclass(frozen=True)
class VoxelGridSpec:
    range_min: tuple = (-25.6, -25.6, -2.0)
    range_max: tuple = (25.6, 25.6, 4.0)
    voxel_size: tuple = (0.1, 0.1, 0.15)

    def __post_init__(self):
        for name in ("range_min", "range_max", "voxel_size"):
            val = tuple(float(v) for v in getattr(self, name))
            if len(val) != 3:
                raise ValueError(f"{name} must have 3 components")
            object.__setattr__(self, name, val)
        for a in range(3):
            if not self.range_max[a] > self.range_min[a]:
                raise ValueError(f"range_max must exceed range_min on axis {a}")
            if not self.voxel_size[a] > 0:
                raise ValueError(f"voxel_size must be positive on axis {a}")
        if min(self.dims) < 1:
            raise ValueError("grid must span at least one voxel per axis")

    @property
    def dims(self) -> tuple:
        """(X, Y, Z) voxel counts."""
        # 51.2 / 0.1 evaluates to 511.999..., so absorb float noise before flooring.
        return tuple(
            int(math.floor((hi - lo) / s + 1e-9))
            for lo, hi, s in zip(self.range_min, self.range_max, self.voxel_size)
        )

    @classmethod
    def from_dims(cls, dims, voxel_size=(0.1, 0.1, 0.15), range_min=None) -> "VoxelGridSpec":
        """Grid with the given voxel counts, centered in x/y, z starting at -2 m."""
        X, Y, Z = dims
        vx, vy, vz = voxel_size
        if range_min is None:
            range_min = (-X * vx / 2.0, -Y * vy / 2.0, -2.0)
        range_max = tuple(lo + n * s for lo, n, s in zip(range_min, dims, voxel_size))
        return cls(tuple(range_min), range_max, tuple(voxel_size))


@dataclass(frozen=True, eq=False)
class VoxelSet:
    coords: np.ndarray  # (N, 3) int64 columns ix, iy, iz
    features: np.ndarray  # (N, 4) float32 mean x, y, z, intensity
    grid: VoxelGridSpec
    counts: np.ndarray | None = None  # points per voxel

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelSet):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValueError("box extents must be positive")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "Box3D":
        return cls(*(float(v) for v in arr[:7]))

    def corners_bev(self) -> np.ndarray:
        """Counter-clockwise (4, 2) BEV rectangle corners."""
        return box_corners_bev(self.as_array()[None])[0]

    def to_json(self) -> dict:
        return {
            "cx": self.cx, "cy": self.cy, "cz": self.cz,
            "length": self.length, "width": self.width, "height": self.height,
            "yaw": self.yaw,
        }


def box_corners_bev(boxes: np.ndarray) -> np.ndarray:
    """(N, 7) boxes -> (N, 4, 2) counter-clockwise BEV corners."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    hl = boxes[:, 3:4] / 2.0
    hw = boxes[:, 4:5] / 2.0
    local_x = np.concatenate([hl, -hl, -hl, hl], axis=1)
    local_y = np.concatenate([hw, hw, -hw, -hw], axis=1)
    c = np.cos(boxes[:, 6:7])
    s = np.sin(boxes[:, 6:7])
    xs = boxes[:, 0:1] + c * local_x - s * local_y
    ys = boxes[:, 1:2] + s * local_x + c * local_y
    return np.stack([xs, ys], axis=-1)


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points strictly inside the oriented box."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    lz = pts[:, 2] - box.cz
    return (
        (np.abs(lx) < box.length / 2)
        & (np.abs(ly) < box.width / 2)
        & (np.abs(lz) < box.height / 2)
    )


@dataclass(frozen=True, eq=False)
class LabeledScene:
    cloud: PointCloud
    boxes: list  # [(Box3D, class_name)]
    seed: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledScene):
            return NotImplemented
        return self.seed == other.seed and self.cloud == other.cloud and self.boxes == other.boxes


# ---------------------------------------------------------------------------
# File I/O


def load_cloud(path) -> PointCloud:
    """Read a flat binary file of little-endian float32 (x, y, z, intensity) records."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"point cloud file not found: {path}")
    raw = open(path, "rb").read()
    if len(raw) % RECORD_BYTES:
        raise CloudFormatError(
            f"{path}: truncated record at index {len(raw) // RECORD_BYTES} "
            f"(file length {len(raw)} is not a multiple of {RECORD_BYTES})"
        )
    pts = np.frombuffer(raw, dtype=_RECORD_DTYPE).reshape(-1, 4)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise CloudFormatError(f"{path}: non-finite value in record {int(np.argmax(bad))}")
    return PointCloud(pts.astype(np.float32))


def write_cloud(cloud: PointCloud, path) -> None:
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(cloud.points, dtype=_RECORD_DTYPE).tobytes())


def labels_to_json(boxes) -> list:
    out = []
    for box, cls in boxes:
        rec = box.to_json()
        rec["class"] = cls
        out.append(rec)
    return out


def labels_from_json(records, source="<labels>") -> list:
    boxes = []
    for i, rec in enumerate(records):
        try:
            box = Box3D(*(float(rec[k]) for k in
                          ("cx", "cy", "cz", "length", "width", "height", "yaw")))
            cls = rec["class"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{source}[{i}]: invalid box record ({exc})") from None
        if not np.isfinite(box.as_array()).all():
            raise ValueError(f"{source}[{i}]: non-finite box value")
        boxes.append((box, cls))
    return boxes


def write_labels(boxes, path) -> None:
    with open(path, "w") as fh:
        json.dump(labels_to_json(boxes), fh, indent=1)
        fh.write("\n")


def read_labels(path) -> list:
    with open(path) as fh:
        return labels_from_json(json.load(fh), source=str(path))


# ---------------------------------------------------------------------------
# Voxelization


def voxel_indices(points: np.ndarray, grid: VoxelGridSpec):
    """Per-point integer voxel index and in-range mask."""
    lo = np.asarray(grid.range_min, dtype=np.float64)
    size = np.asarray(grid.voxel_size, dtype=np.float64)
    idx = np.floor((points[:, :3].astype(np.float64) - lo) / size).astype(np.int64)
    dims = np.asarray(grid.dims, dtype=np.int64)
    keep = ((idx >= 0) & (idx < dims)).all(axis=1)
    return idx, keep


def voxelize(cloud: PointCloud, grid: VoxelGridSpec) -> VoxelSet:
    """Group points into voxels; each voxel's feature is the mean of its points.

    No per-voxel cap and no subsampling, so the result is exact and
    independent of point order.
    """
    pts = cloud.points
    idx, keep = voxel_indices(pts, grid)
    idx = idx[keep]
    X, Y, _ = grid.dims
    if idx.shape[0] == 0:
        return VoxelSet(np.zeros((0, 3), np.int64), np.zeros((0, 4), np.float32), grid,
                        np.zeros(0, np.int64))
    key = (idx[:, 2] * Y + idx[:, 1]) * X + idx[:, 0]
    uniq, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    sums = np.zeros((uniq.shape[0], 4), np.float64)
    np.add.at(sums, inverse, pts[keep].astype(np.float64))
    feats = (sums / counts[:, None]).astype(np.float32)
    coords = np.stack([uniq % X, (uniq // X) % Y, uniq // (X * Y)], axis=1)
    return VoxelSet(coords.astype(np.int64), feats, grid, counts.astype(np.int64))


# ---------------------------------------------------------------------------
# Synthetic scenes


def _bev_iou_zero(box: Box3D, others, margin: float) -> bool:
    # Conservative: bounding circles must be separated.
    r = 0.5 * math.hypot(box.length, box.width)
    for other, _ in others:
        ro = 0.5 * math.hypot(other.length, other.width)
        if math.hypot(box.cx - other.cx, box.cy - other.cy) < r + ro + margin:
            return False
    return True


def _surface_points(rng, box: Box3D, n: int, inset: float) -> np.ndarray:
    l, w, h = box.length - 2 * inset, box.width - 2 * inset, box.height - 2 * inset
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([l, w, h])
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    ext = np.array([l, w, h])
    u[np.arange(n), axis] = sign * ext[axis]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = box.cx + c * u[:, 0] - s * u[:, 1]
    y = box.cy + s * u[:, 0] + c * u[:, 1]
    z = box.cz + u[:, 2]
    inten = rng.uniform(0.2, 1.0, size=n)
    return np.stack([x, y, z, inten], axis=1)


def synth_scene(
    seed: int,
    n_objects: int,
    class_mix: Mapping[str, float] | None = None,
    grid: VoxelGridSpec | None = None,
    points_per_object: int = 256,
    clutter_points: int = 4096,
    ground_z: float = 0.0,
    retry_budget: int = 200,
) -> LabeledScene:
    """Plant non-overlapping boxes with surface points on top of ground clutter."""
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    grid = grid or VoxelGridSpec()
    class_mix = dict(class_mix or {"vehicle": 0.5, "pedestrian": 0.25, "cyclist": 0.25})
    names = sorted(class_mix, key=CLASSES.index)
    probs = np.array([class_mix[k] for k in names], dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-6 or (probs < 0).any():
        raise ValueError("class_mix probabilities must be non-negative and sum to 1")

    rng = np.random.default_rng(seed)
    lo = np.asarray(grid.range_min)
    hi = np.asarray(grid.range_max)
    margin = 3.0
    boxes = []
    for i in range(n_objects):
        cls = names[int(rng.choice(len(names), p=probs))]
        (l0, l1), (w0, w1), (h0, h1) = CLASS_SIZE_RANGES[cls]
        for _ in range(retry_budget):
            l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
            cx = rng.uniform(lo[0] + margin, hi[0] - margin)
            cy = rng.uniform(lo[1] + margin, hi[1] - margin)
            yaw = rng.uniform(-math.pi, math.pi)
            box = Box3D(float(cx), float(cy), float(ground_z + h / 2), float(l), float(w),
                        float(h), float(yaw))
            if _bev_iou_zero(box, boxes, margin=0.2):
                boxes.append((box, cls))
                break
        else:
            raise PlacementError(
                f"could not place object {i} within the retry budget of {retry_budget} attempts"
            )

    parts = []
    n_clutter = clutter_points
    clutter = np.stack([
        rng.uniform(lo[0], hi[0], n_clutter),
        rng.uniform(lo[1], hi[1], n_clutter),
        ground_z + rng.normal(0.0, 0.03, n_clutter),
        rng.uniform(0.0, 0.3, n_clutter),
    ], axis=1)
    parts.append(clutter)
    for box, _ in boxes:
        parts.append(_surface_points(rng, box, points_per_object, inset=0.01))
    pts = np.concatenate(parts, axis=0).astype(np.float32)
    pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
    return LabeledScene(PointCloud(pts), boxes, int(seed))


def reference_scene(grid: VoxelGridSpec | None = None) -> LabeledScene:
    """Fixed scene used by the determinism and latency checks."""
    return synth_scene(seed=0, n_objects=12, grid=grid)
