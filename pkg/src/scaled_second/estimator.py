"""scikit-learn style wrappers around voxelization and the detector.

``fit`` never trains anything: it validates parameters and instantiates the
network with deterministic seeded weights (or loads a weight file).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import archspec, heads, metrics
from .network import build, load_weights
from .pointcloud import PointCloud, VoxelGridSpec, voxelize


def check_cloud(X) -> PointCloud:
    """Accept a PointCloud or an (N, 3) / (N, 4) array; a missing intensity column becomes 0."""
    if isinstance(X, PointCloud):
        return X
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] not in (3, 4):
        raise ValueError(f"expected an (N, 3) or (N, 4) point array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("point array contains non-finite values")
    if arr.shape[1] == 3:
        arr = np.concatenate([arr, np.zeros((arr.shape[0], 1), np.float32)], axis=1)
    return PointCloud(arr)


def check_clouds(X) -> list:
    """A single cloud or a sequence of clouds, returned as a list of PointCloud."""
    if isinstance(X, PointCloud) or (isinstance(X, np.ndarray) and X.ndim == 2):
        return [check_cloud(X)]
    return [check_cloud(x) for x in X]


def check_grid(grid_dims, voxel_size) -> VoxelGridSpec:
    dims = tuple(int(d) for d in grid_dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"grid_dims must be three positive integers, got {grid_dims}")
    size = tuple(float(v) for v in voxel_size)
    if len(size) != 3 or min(size) <= 0:
        raise ValueError(f"voxel_size must be three positive numbers, got {voxel_size}")
    return VoxelGridSpec.from_dims(dims, size)


class VoxelGridTransformer(BaseEstimator, TransformerMixin):
    def __init__(self, grid_dims=(512, 512, 40), voxel_size=(0.1, 0.1, 0.15)):
        self.grid_dims = grid_dims
        self.voxel_size = voxel_size

    def fit(self, X=None, y=None):
        self.grid_ = check_grid(self.grid_dims, self.voxel_size)
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        return [voxelize(c, self.grid_) for c in check_clouds(X)]


class ScaledSecondDetector(BaseEstimator):
    """Detector estimator. ``predict`` returns one list of Detection per input cloud."""

    def __init__(self, preset="A0", head="anchor", seed=0, grid_dims=(512, 512, 40),
                 voxel_size=(0.1, 0.1, 0.15), threads=1, score_threshold=None, nms_iou=None,
                 weights=None):
        self.preset = preset
        self.head = head
        self.seed = seed
        self.grid_dims = grid_dims
        self.voxel_size = voxel_size
        self.threads = threads
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.weights = weights

    def _spec(self):
        spec = self.preset if isinstance(self.preset, archspec.DetectorSpec) \
            else archspec.preset(self.preset, self.head)
        overrides = {k: v for k, v in (("score_threshold", self.score_threshold),
                                       ("nms_iou", self.nms_iou)) if v is not None}
        if overrides:
            spec = archspec.with_head(spec, **overrides)
        return archspec.check(spec)

    def fit(self, X=None, y=None):
        if int(self.threads) < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        self.grid_ = check_grid(self.grid_dims, self.voxel_size)
        self.spec_ = self._spec()
        archspec.pre_head_resolution(self.spec_, self.grid_)
        self.detector_ = (load_weights(self.spec_, self.weights) if self.weights is not None
                          else build(self.spec_, int(self.seed)))
        self.n_params_ = self.detector_.num_params
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "detector_")
        return [heads.detect(self.detector_, c, self.grid_, int(self.threads))[0]
                for c in check_clouds(X)]

    def score(self, X, y) -> float:
        """mAPH of the predictions against per-cloud (Box3D, class) label lists."""
        preds = self.predict(X)
        clouds_y = [y] if len(preds) == 1 and (not y or isinstance(y[0], tuple)) else y
        if len(clouds_y) != len(preds):
            raise ValueError(f"{len(preds)} clouds but {len(clouds_y)} label lists")
        return metrics.evaluate_corpus(list(zip(preds, clouds_y))).mAPH
