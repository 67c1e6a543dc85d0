"""Sparse 3D and dense 2D convolution kernels plus their dense reference oracles.

Axis conventions:

* sparse coordinates are ``(ix, iy, iz)`` rows, kept sorted by ``(iz, iy, ix)``;
* dense 3D arrays are ``C x Z x Y x X``;
* dense 2D maps (``DenseTensor2D``) are plain ``C x H x W`` float32 arrays;
* 3D weights are shaped ``(kz, ky, kx, Cin, Cout)`` and 2D weights
  ``(kh, kw, Cin, Cout)``; the kernel tuple on ``ConvParams`` is reported in
  ``(kx, ky, kz)`` / ``(kh, kw)`` order.

Convolutions are cross-correlations. Every kernel accumulates in float32 over
kernel offsets in lexicographic order, and splits its work into fixed-size
output chunks, so the result does not depend on the worker count.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

DenseTensor2D = np.ndarray

SPARSE_CHUNK_ROWS = 4096
DENSE_BAND_ROWS = 16
CHECK_FINITE = True

MODES = ("submanifold", "strided", "dense", "transposed")


def _as_tuple(v, n):
    if np.isscalar(v):
        return (int(v),) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


@dataclass(frozen=True, eq=False)
class SparseTensor3D:
    dims: tuple  # (X, Y, Z)
    coords: np.ndarray  # (N, 3) int64, canonical order
    features: np.ndarray  # (N, C) float32

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "coords", np.asarray(self.coords, np.int64).reshape(-1, 3))
        feats = np.asarray(self.features, np.float32)
        if feats.ndim != 2 or feats.shape[0] != self.coords.shape[0]:
            raise ValueError("features must be an (N, C) array aligned with coords")
        object.__setattr__(self, "features", feats)

    @property
    def active(self) -> np.ndarray:
        return self.coords

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.coords.shape[0]

    def keys(self) -> np.ndarray:
        return linear_keys(self.coords, self.dims)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseTensor3D):
            return NotImplemented
        return (
            self.dims == other.dims
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features)
        )

    @classmethod
    def from_unsorted(cls, dims, coords, features) -> "SparseTensor3D":
        """Build a tensor in canonical order, rejecting duplicates and out-of-range sites."""
        dims = tuple(int(d) for d in dims)
        coords = np.asarray(coords, np.int64).reshape(-1, 3)
        features = np.asarray(features, np.float32).reshape(coords.shape[0], -1)
        if coords.size and ((coords < 0).any() or (coords >= np.array(dims)).any()):
            raise ValueError("active coordinate out of bounds")
        keys = linear_keys(coords, dims)
        order = np.argsort(keys, kind="stable")
        if np.any(np.diff(keys[order]) == 0):
            raise ValueError("duplicate active coordinate")
        return cls(dims, coords[order], features[order])

    @classmethod
    def from_voxels(cls, voxels) -> "SparseTensor3D":
        return cls(voxels.grid.dims, voxels.coords, voxels.features)


def linear_keys(coords: np.ndarray, dims) -> np.ndarray:
    X, Y, _ = dims
    return (coords[:, 2] * Y + coords[:, 1]) * X + coords[:, 0]


@dataclass(frozen=True, eq=False)
class ConvParams:
    """One convolution layer: weights plus the bias -> norm -> activation epilogue."""

    weights: np.ndarray
    mode: str
    stride: tuple | int = 1
    padding: tuple | int = 0
    bias: np.ndarray | None = None
    norm: tuple | None = None  # (scale, shift), per output channel
    activation: str = "none"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown conv mode {self.mode!r}")
        w = np.asarray(self.weights, np.float32)
        nd = 3 if self.mode in ("submanifold", "strided") else 2
        if w.ndim != nd + 2:
            raise ValueError(f"{self.mode} weights must have {nd + 2} dims, got {w.ndim}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "stride", _as_tuple(self.stride, nd))
        object.__setattr__(self, "padding", _as_tuple(self.padding, nd))
        if self.bias is not None:
            object.__setattr__(self, "bias", np.asarray(self.bias, np.float32).reshape(-1))
        if self.norm is not None:
            scale, shift = self.norm
            object.__setattr__(self, "norm", (np.asarray(scale, np.float32).reshape(-1),
                                              np.asarray(shift, np.float32).reshape(-1)))
        if self.activation not in ("none", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.mode == "submanifold":
            if any(s != 1 for s in self.stride):
                raise ValueError("submanifold convolution requires stride 1")
            if any(k % 2 == 0 for k in self.kernel):
                raise ValueError("submanifold convolution requires an odd kernel")
        if self.mode == "transposed":
            if self.kernel != self.stride or any(self.padding):
                raise ValueError("transposed convolution requires kernel == stride and padding 0")

    @property
    def kernel(self) -> tuple:
        # (kx, ky, kz) for 3D, (kh, kw) for 2D
        shape = self.weights.shape[:-2]
        return tuple(reversed(shape)) if len(shape) == 3 else tuple(shape)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[-2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[-1]

    @property
    def kernel_volume(self) -> int:
        return int(np.prod(self.weights.shape[:-2]))

    @property
    def num_params(self) -> int:
        n = self.weights.size
        if self.bias is not None:
            n += self.bias.size
        if self.norm is not None:
            n += self.norm[0].size + self.norm[1].size
        return int(n)

    def arrays(self) -> dict:
        out = {"weights": self.weights}
        if self.bias is not None:
            out["bias"] = self.bias
        if self.norm is not None:
            out["norm_scale"], out["norm_shift"] = self.norm
        return out


def _epilogue(out: np.ndarray, p: ConvParams, channel_axis: int) -> np.ndarray:
    shape = [1] * out.ndim
    shape[channel_axis] = -1
    if p.bias is not None:
        out += p.bias.reshape(shape)
    if p.norm is not None:
        out *= p.norm[0].reshape(shape)
        out += p.norm[1].reshape(shape)
    if p.activation == "relu":
        np.maximum(out, 0, out=out)
    if CHECK_FINITE and not np.isfinite(out).all():
        raise FloatingPointError("non-finite value produced by convolution")
    return out


def _run_chunks(fn, n_chunks: int, workers: int):
    if workers <= 1 or n_chunks <= 1:
        for i in range(n_chunks):
            fn(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, range(n_chunks)))


# ---------------------------------------------------------------------------
# Sparse 3D


def conv_output_dims(dims, kernel, stride, padding) -> tuple:
    return tuple((d + 2 * p - k) // s + 1 for d, k, s, p in zip(dims, kernel, stride, padding))


def _lookup(keys: np.ndarray, query: np.ndarray):
    """Row index of each query key in the sorted key array, or -1."""
    if keys.size == 0:
        return np.full(query.shape, -1, np.int64)
    pos = np.searchsorted(keys, query)
    pos = np.minimum(pos, keys.size - 1)
    return np.where(keys[pos] == query, pos, -1)


def _offsets(kernel_zyx):
    return list(itertools.product(*(range(k) for k in kernel_zyx)))


def build_rulebook(x: SparseTensor3D, p: ConvParams):
    """Output coordinates/dims and, per kernel offset, the source row of every output (-1 if none)."""
    kx, ky, kz = p.kernel
    in_dims = np.array(x.dims)
    keys = x.keys()
    if p.mode == "submanifold":
        out_dims = x.dims
        out_coords = x.coords
        rules = []
        for dz, dy, dx in _offsets((kz, ky, kx)):
            nb = out_coords + np.array([dx - kx // 2, dy - ky // 2, dz - kz // 2])
            ok = ((nb >= 0) & (nb < in_dims)).all(axis=1)
            src = np.full(nb.shape[0], -1, np.int64)
            src[ok] = _lookup(keys, linear_keys(nb[ok], x.dims))
            rules.append(src)
        return out_coords, out_dims, rules

    stride = np.array(p.stride)
    pad = np.array(p.padding)
    out_dims = conv_output_dims(x.dims, p.kernel, p.stride, p.padding)
    odims = np.array(out_dims)
    cand = []
    for dz, dy, dx in _offsets((kz, ky, kx)):
        num = x.coords + pad - np.array([dx, dy, dz])
        ok = ((num % stride) == 0).all(axis=1)
        o = num[ok] // stride
        ok2 = ((o >= 0) & (o < odims)).all(axis=1)
        cand.append(linear_keys(o[ok2], out_dims))
    okeys = np.unique(np.concatenate(cand)) if cand else np.zeros(0, np.int64)
    X, Y, _ = out_dims
    out_coords = np.stack([okeys % X, (okeys // X) % Y, okeys // (X * Y)], axis=1).astype(np.int64)
    rules = []
    for dz, dy, dx in _offsets((kz, ky, kx)):
        src_c = out_coords * stride - pad + np.array([dx, dy, dz])
        ok = ((src_c >= 0) & (src_c < in_dims)).all(axis=1)
        src = np.full(src_c.shape[0], -1, np.int64)
        src[ok] = _lookup(keys, linear_keys(src_c[ok], x.dims))
        rules.append(src)
    return out_coords, out_dims, rules


def sparse_conv3d_with_pairs(x: SparseTensor3D, p: ConvParams, workers: int = 1):
    """sparse_conv3d that also returns the number of (input, output) rulebook pairs."""
    if p.mode not in ("submanifold", "strided"):
        raise ValueError(f"sparse_conv3d needs a sparse mode, got {p.mode!r}")
    if p.in_channels != x.channels:
        raise ValueError(f"channel mismatch: tensor has {x.channels}, layer expects {p.in_channels}")
    out_coords, out_dims, rules = build_rulebook(x, p)
    n_out = out_coords.shape[0]
    cout = p.out_channels
    out = np.zeros((n_out, cout), np.float32)
    wflat = p.weights.reshape(-1, p.in_channels, cout)
    feats = x.features
    n_chunks = -(-n_out // SPARSE_CHUNK_ROWS)

    def run(ci):
        lo = ci * SPARSE_CHUNK_ROWS
        hi = min(lo + SPARSE_CHUNK_ROWS, n_out)
        acc = out[lo:hi]
        for k, src in enumerate(rules):
            s = src[lo:hi]
            rows = np.flatnonzero(s >= 0)
            if rows.size:
                acc[rows] += feats[s[rows]] @ wflat[k]

    _run_chunks(run, n_chunks, workers)
    pairs = int(sum(int((r >= 0).sum()) for r in rules))
    _epilogue(out, p, channel_axis=1)
    return SparseTensor3D(out_dims, out_coords, out), pairs


def sparse_conv3d(x: SparseTensor3D, p: ConvParams, workers: int = 1) -> SparseTensor3D:
    return sparse_conv3d_with_pairs(x, p, workers)[0]


def to_dense(x: SparseTensor3D) -> np.ndarray:
    X, Y, Z = x.dims
    out = np.zeros((x.channels, Z, Y, X), np.float32)
    if len(x):
        c = x.coords
        out[:, c[:, 2], c[:, 1], c[:, 0]] = x.features.T
    return out


def sparsify(dense: np.ndarray) -> SparseTensor3D:
    """Inverse of to_dense for tensors whose active rows are not all-zero."""
    C, Z, Y, X = dense.shape
    iz, iy, ix = np.nonzero(np.any(dense != 0, axis=0))
    coords = np.stack([ix, iy, iz], axis=1)
    feats = dense[:, iz, iy, ix].T
    return SparseTensor3D.from_unsorted((X, Y, Z), coords, feats)


def dense_conv3d_oracle(x: np.ndarray, p: ConvParams, counter: dict | None = None) -> np.ndarray:
    """Plain zero-padded strided cross-correlation of a C x Z x Y x X array.

    No sparsity logic: submanifold layers are evaluated as ordinary centered
    convolutions. Accumulates in float64. ``counter['macs']`` is increased by
    out_sites * kernel_volume * Cin * Cout when a dict is given.
    """
    C = x.shape[0]
    if C != p.in_channels:
        raise ValueError(f"channel mismatch: array has {C}, layer expects {p.in_channels}")
    kx, ky, kz = p.kernel
    if p.mode == "submanifold":
        stride, pad = (1, 1, 1), (kx // 2, ky // 2, kz // 2)
    else:
        stride, pad = p.stride, p.padding
    sx, sy, sz = stride
    px, py, pz = pad
    _, Z, Y, X = x.shape
    oX, oY, oZ = conv_output_dims((X, Y, Z), (kx, ky, kz), stride, pad)
    xp = np.zeros((C, Z + 2 * pz, Y + 2 * py, X + 2 * px), np.float64)
    xp[:, pz:pz + Z, py:py + Y, px:px + X] = x
    w = p.weights.astype(np.float64)
    out = np.zeros((p.out_channels, oZ, oY, oX), np.float64)
    for a in range(kz):
        for b in range(ky):
            for c in range(kx):
                patch = xp[:, a:a + sz * (oZ - 1) + 1:sz,
                           b:b + sy * (oY - 1) + 1:sy,
                           c:c + sx * (oX - 1) + 1:sx]
                out += np.einsum("czyx,cd->dzyx", patch, w[a, b, c])
    if counter is not None:
        counter["macs"] = counter.get("macs", 0) + oZ * oY * oX * w[..., 0, 0].size * C * p.out_channels
    out = out.astype(np.float32)
    return _epilogue(out, p, channel_axis=0)


def dense_active_sites_oracle(occupancy: np.ndarray, p: ConvParams) -> np.ndarray:
    """Z x Y x X mask of output sites whose receptive field holds an active input."""
    ones = ConvParams(np.ones(p.weights.shape[:3] + (1, 1), np.float32), p.mode,
                      p.stride, p.padding)
    reach = dense_conv3d_oracle(occupancy[None].astype(np.float32), ones)[0]
    if p.mode == "submanifold":
        return occupancy.astype(bool)
    return reach > 0


# ---------------------------------------------------------------------------
# Dense 2D


def conv2d(x: DenseTensor2D, p: ConvParams, workers: int = 1) -> DenseTensor2D:
    """Zero-padded strided 2D cross-correlation on a C x H x W map."""
    if p.mode != "dense":
        raise ValueError(f"conv2d needs mode 'dense', got {p.mode!r}")
    C, H, W = x.shape
    if C != p.in_channels:
        raise ValueError(f"channel mismatch: map has {C}, layer expects {p.in_channels}")
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.padding
    oH = (H + 2 * ph - kh) // sh + 1
    oW = (W + 2 * pw - kw) // sw + 1
    if ph or pw:
        xp = np.zeros((C, H + 2 * ph, W + 2 * pw), np.float32)
        xp[:, ph:ph + H, pw:pw + W] = x
    else:
        xp = np.ascontiguousarray(x, np.float32)
    wt = np.ascontiguousarray(p.weights.transpose(0, 1, 3, 2))  # kh, kw, Cout, Cin
    out = np.zeros((p.out_channels, oH, oW), np.float32)
    n_bands = -(-oH // DENSE_BAND_ROWS)

    def run(bi):
        r0 = bi * DENSE_BAND_ROWS
        r1 = min(r0 + DENSE_BAND_ROWS, oH)
        acc = np.zeros((p.out_channels, (r1 - r0) * oW), np.float32)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i + r0 * sh:i + (r1 - 1) * sh + 1:sh, j:j + (oW - 1) * sw + 1:sw]
                acc += wt[i, j] @ patch.reshape(C, -1)
        out[:, r0:r1] = acc.reshape(p.out_channels, r1 - r0, oW)

    _run_chunks(run, n_bands, workers)
    return _epilogue(out, p, channel_axis=0)


def transposed_conv2d(x: DenseTensor2D, p: ConvParams, workers: int = 1) -> DenseTensor2D:
    """Transposed convolution with kernel == stride: each input cell fills its own output block."""
    if p.mode != "transposed":
        raise ValueError(f"transposed_conv2d needs mode 'transposed', got {p.mode!r}")
    C, H, W = x.shape
    if C != p.in_channels:
        raise ValueError(f"channel mismatch: map has {C}, layer expects {p.in_channels}")
    sh, sw = p.stride
    wt = np.ascontiguousarray(p.weights.transpose(0, 1, 3, 2))
    out = np.zeros((p.out_channels, H * sh, W * sw), np.float32)
    xc = np.ascontiguousarray(x, np.float32)
    n_bands = -(-H // DENSE_BAND_ROWS)

    def run(bi):
        r0 = bi * DENSE_BAND_ROWS
        r1 = min(r0 + DENSE_BAND_ROWS, H)
        flat = xc[:, r0:r1].reshape(C, -1)
        for i in range(sh):
            for j in range(sw):
                blk = (wt[i, j] @ flat).reshape(p.out_channels, r1 - r0, W)
                out[:, r0 * sh + i:r1 * sh:sh, j::sw] = blk

    _run_chunks(run, n_bands, workers)
    return _epilogue(out, p, channel_axis=0)


def bilinear_upsample2x(x: DenseTensor2D) -> DenseTensor2D:
    """2x bilinear upsampling, half-pixel (align_corners=False) convention with border clamping."""
    C, H, W = x.shape

    def taps(n):
        t = np.arange(2 * n, dtype=np.float64)
        s = np.clip((t + 0.5) / 2.0 - 0.5, 0.0, n - 1)
        i0 = np.floor(s).astype(np.int64)
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, s - i0

    y0, y1, fy = taps(H)
    x0, x1, fx = taps(W)
    v = x.astype(np.float64)
    rows = v[:, y0] * (1 - fy)[None, :, None] + v[:, y1] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx
    return out.astype(np.float32)
