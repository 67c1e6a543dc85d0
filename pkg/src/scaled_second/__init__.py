"""Sparse-voxel LiDAR detectors at several scales, with cost-aware benchmarking."""

__version__ = "0.1.0"

from .archspec import DetectorSpec, HeadSpec, SpecError, count_params, preset  # noqa: E402
from .heads import Detection, detect  # noqa: E402
from .network import Detector, build, forward  # noqa: E402
from .pointcloud import Box3D, PointCloud, VoxelGridSpec, reference_scene, synth_scene  # noqa: E402

__all__ = [
    "Box3D", "Detection", "Detector", "DetectorSpec", "HeadSpec", "PointCloud", "SpecError",
    "VoxelGridSpec", "build", "count_params", "detect", "forward", "preset", "reference_scene",
    "synth_scene", "ScaledSecondDetector", "VoxelGridTransformer", "__version__",
]


def __getattr__(name):
    # the estimator wrappers pull in scikit-learn, so load them on first use
    if name in ("ScaledSecondDetector", "VoxelGridTransformer"):
        from . import estimator
        return getattr(estimator, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
