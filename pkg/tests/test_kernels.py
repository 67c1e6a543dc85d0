import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import (
    bilinear2x_loops,
    conv2d_loops,
    conv3d_loops,
    random_sparse_case,
    strided_active_loops,
    transposed_conv2d_loops,
)
from scaled_second.kernels import (
    ConvParams,
    SparseTensor3D,
    bilinear_upsample2x,
    conv2d,
    dense_active_sites_oracle,
    dense_conv3d_oracle,
    sparse_conv3d,
    sparse_conv3d_with_pairs,
    sparsify,
    to_dense,
    transposed_conv2d,
)


def _tensor(rng, **kw):
    dims, coords, feats = random_sparse_case(rng, **kw)
    return SparseTensor3D.from_unsorted(dims, coords, feats)


def _params(rng, mode, cin, cout, k=3, stride=1, pad=1, epilogue=False):
    w = rng.standard_normal((k, k, k, cin, cout)).astype(np.float32) * 0.3
    if not epilogue:
        return ConvParams(w, mode, stride, pad)
    return ConvParams(w, mode, stride, pad, bias=rng.standard_normal(cout),
                      norm=(rng.uniform(0.5, 1.5, cout), rng.standard_normal(cout)),
                      activation="relu")


def _epilogue_ref(out, p):
    if p.bias is not None:
        out = out + p.bias[:, None, None, None]
    if p.norm is not None:
        out = out * p.norm[0][:, None, None, None] + p.norm[1][:, None, None, None]
    if p.activation == "relu":
        out = np.maximum(out, 0)
    return out


def _check_against_loops(x, p):
    y = sparse_conv3d(x, p)
    dense_in = to_dense(x)
    if p.mode == "submanifold":
        ref = conv3d_loops(dense_in, p.weights, (1, 1, 1), (1, 1, 1))
        mask = np.zeros(dense_in.shape[1:], bool)
        mask[x.coords[:, 2], x.coords[:, 1], x.coords[:, 0]] = True
    else:
        ref = conv3d_loops(dense_in, p.weights, p.stride, p.padding)
        occ = np.zeros(dense_in.shape[1:], bool)
        occ[x.coords[:, 2], x.coords[:, 1], x.coords[:, 0]] = True
        mask = strided_active_loops(occ, p.weights.shape[:3], p.stride, p.padding)
    ref = _epilogue_ref(ref, p)
    got_mask = np.zeros(ref.shape[1:], bool)
    got_mask[y.coords[:, 2], y.coords[:, 1], y.coords[:, 0]] = True
    assert np.array_equal(got_mask, mask)
    assert (np.diff(y.keys()) > 0).all()
    got = to_dense(y)
    return float(np.max(np.abs(got[:, mask] - ref[:, mask]), initial=0.0))


@pytest.mark.parametrize("mode", ["submanifold", "strided"])
def test_sparse_conv_matches_loop_oracle(mode):
    rng = np.random.default_rng(100 if mode == "submanifold" else 200)
    for _ in range(25):
        x = _tensor(rng, max_dim=10)
        cout = int(rng.integers(1, 9))
        p = _params(rng, mode, x.channels, cout, stride=1 if mode == "submanifold" else 2,
                    epilogue=bool(rng.integers(0, 2)))
        assert _check_against_loops(x, p) <= 1e-5


def test_package_dense_oracle_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for mode, stride in (("submanifold", 1), ("strided", 2), ("strided", 1)):
        x = to_dense(_tensor(rng, max_dim=9))
        p = _params(rng, mode, x.shape[0], 4, stride=stride)
        ref = conv3d_loops(x, p.weights, p.stride, (1, 1, 1))
        np.testing.assert_allclose(dense_conv3d_oracle(x, p), ref, atol=1e-5)


def test_dense_oracle_counts_macs():
    rng = np.random.default_rng(4)
    x = to_dense(_tensor(rng, max_dim=6))
    p = _params(rng, "strided", x.shape[0], 3, stride=2)
    counter = {}
    out = dense_conv3d_oracle(x, p, counter)
    assert counter["macs"] == out[0].size * 27 * x.shape[0] * 3


def test_strided_anisotropic_kernel_matches_loops():
    # the height-compression shape: kernel only along z, stride 2 in z
    rng = np.random.default_rng(5)
    x = _tensor(rng, max_dim=9)
    w = rng.standard_normal((3, 1, 1, x.channels, 5)).astype(np.float32)
    p = ConvParams(w, "strided", (1, 1, 2), (0, 0, 0))
    y = sparse_conv3d(x, p)
    ref = conv3d_loops(to_dense(x), w, (1, 1, 2), (0, 0, 0))
    occ = np.zeros(to_dense(x).shape[1:], bool)
    occ[x.coords[:, 2], x.coords[:, 1], x.coords[:, 0]] = True
    mask = strided_active_loops(occ, (3, 1, 1), (1, 1, 2), (0, 0, 0))
    assert y.dims == (x.dims[0], x.dims[1], (x.dims[2] - 3) // 2 + 1)
    got = to_dense(y)
    assert np.array_equal(np.any(got != 0, axis=0) | mask, mask)
    np.testing.assert_allclose(got[:, mask], ref[:, mask], atol=1e-5)


def test_active_site_oracle_matches_loops():
    rng = np.random.default_rng(6)
    x = _tensor(rng, max_dim=8)
    occ = np.zeros(to_dense(x).shape[1:], bool)
    occ[x.coords[:, 2], x.coords[:, 1], x.coords[:, 0]] = True
    p = _params(rng, "strided", x.channels, 2, stride=2)
    assert np.array_equal(dense_active_sites_oracle(occ, p),
                          strided_active_loops(occ, (3, 3, 3), (2, 2, 2), (1, 1, 1)))


def test_identity_kernel_is_bit_exact():
    rng = np.random.default_rng(7)
    x = _tensor(rng)
    C = x.channels
    p = ConvParams(np.eye(C, dtype=np.float32).reshape(1, 1, 1, C, C), "submanifold")
    assert sparse_conv3d(x, p) == x


def test_isolated_site_sees_only_center_tap():
    rng = np.random.default_rng(8)
    feat = rng.standard_normal((1, 3)).astype(np.float32)
    x = SparseTensor3D((5, 5, 5), [[2, 2, 2]], feat)
    p = ConvParams(rng.standard_normal((3, 3, 3, 3, 4)).astype(np.float32), "submanifold",
                   bias=np.arange(4.0))
    y = sparse_conv3d(x, p)
    np.testing.assert_allclose(y.features[0], feat[0] @ p.weights[1, 1, 1] + np.arange(4.0), rtol=1e-6)


def test_submanifold_validation():
    w = np.zeros((2, 2, 2, 1, 1), np.float32)
    with pytest.raises(ValueError, match="odd"):
        ConvParams(w, "submanifold")
    with pytest.raises(ValueError, match="stride"):
        ConvParams(np.zeros((3, 3, 3, 1, 1), np.float32), "submanifold", stride=2)
    with pytest.raises(ValueError):
        ConvParams(np.zeros((3, 3, 1, 1), np.float32), "transposed", stride=2)


def test_channel_mismatch():
    x = SparseTensor3D((4, 4, 4), [[0, 0, 0]], np.ones((1, 2)))
    p = ConvParams(np.zeros((3, 3, 3, 3, 1), np.float32), "submanifold")
    with pytest.raises(ValueError, match="channel"):
        sparse_conv3d(x, p)


def test_sparse_tensor_rejects_duplicates_and_out_of_bounds():
    with pytest.raises(ValueError, match="duplicate"):
        SparseTensor3D.from_unsorted((3, 3, 3), [[0, 0, 0], [0, 0, 0]], np.ones((2, 1)))
    with pytest.raises(ValueError, match="bounds"):
        SparseTensor3D.from_unsorted((3, 3, 3), [[3, 0, 0]], np.ones((1, 1)))


def test_to_dense_empty_and_single():
    empty = SparseTensor3D((3, 4, 5), np.zeros((0, 3)), np.zeros((0, 2)))
    assert not to_dense(empty).any() and to_dense(empty).shape == (2, 5, 4, 3)
    one = SparseTensor3D((3, 4, 5), [[1, 2, 3]], [[1.0, 2.0]])
    d = to_dense(one)
    assert np.count_nonzero(np.any(d != 0, axis=0)) == 1 and d[:, 3, 2, 1].tolist() == [1.0, 2.0]


@given(st.integers(0, 2 ** 32))
def test_sparsify_round_trip(seed):
    x = _tensor(np.random.default_rng(seed), max_dim=8)
    assert sparsify(to_dense(x)) == x


def test_dense_oracle_impulse_response():
    x = np.zeros((1, 7, 7, 7), np.float32)
    x[0, 3, 3, 3] = 1
    p = ConvParams(np.ones((3, 3, 3, 1, 1), np.float32), "submanifold")
    out = dense_conv3d_oracle(x, p)[0]
    assert out[2:5, 2:5, 2:5].tolist() == np.ones((3, 3, 3)).tolist()
    assert out.sum() == 27


@given(st.integers(0, 2 ** 32), st.sampled_from(["submanifold", "strided"]))
def test_sparse_conv_linearity(seed, mode):
    rng = np.random.default_rng(seed)
    x = _tensor(rng, max_dim=7, max_c=4)
    y_feats = rng.standard_normal(x.features.shape).astype(np.float32)
    y = SparseTensor3D(x.dims, x.coords, y_feats)
    p = _params(rng, mode, x.channels, 3, stride=1 if mode == "submanifold" else 2)
    a, b = 0.7, -1.3
    combo = SparseTensor3D(x.dims, x.coords, a * x.features + b * y_feats)
    lhs = sparse_conv3d(combo, p).features
    rhs = a * sparse_conv3d(x, p).features + b * sparse_conv3d(y, p).features
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_sparse_conv_bit_identical_across_workers():
    rng = np.random.default_rng(9)
    # large enough to span several output chunks
    flat = rng.choice(48 ** 3, size=12000, replace=False)
    c = np.stack([flat % 48, (flat // 48) % 48, flat // (48 * 48)], axis=1)
    x = SparseTensor3D.from_unsorted((48, 48, 48), c, rng.standard_normal((12000, 8)))
    for mode, stride in (("submanifold", 1), ("strided", 2)):
        p = _params(rng, mode, 8, 16, stride=stride, epilogue=True)
        ref = sparse_conv3d(x, p, workers=1)
        for w in (2, 4, 8):
            assert sparse_conv3d(x, p, workers=w) == ref


def test_pair_count_matches_rulebook_definition():
    rng = np.random.default_rng(10)
    x = _tensor(rng, max_dim=8)
    p = _params(rng, "submanifold", x.channels, 2)
    _, pairs = sparse_conv3d_with_pairs(x, p)
    occ = set(map(tuple, x.coords.tolist()))
    expected = sum((cx + dx, cy + dy, cz + dz) in occ for cx, cy, cz in occ
                   for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1))
    assert pairs == expected


# ---------------------------------------------------------------------------
# 2D


def _p2(rng, cin, cout, k, stride, pad, mode="dense"):
    return ConvParams(rng.standard_normal((k, k, cin, cout)).astype(np.float32), mode, stride, pad)


def test_conv2d_identity_and_shape():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 16, 16)).astype(np.float32)
    ident = ConvParams(np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3), "dense")
    assert np.array_equal(conv2d(x, ident), x)
    assert conv2d(x, _p2(rng, 3, 5, 3, 2, 1)).shape == (5, 8, 8)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2)])
def test_conv2d_matches_loops(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((4, 37, 21)).astype(np.float32)
    p = _p2(rng, 4, 6, k, stride, pad)
    np.testing.assert_allclose(conv2d(x, p), conv2d_loops(x, p.weights, stride, pad), atol=1e-5)


def test_transposed_identity_and_shape():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 8, 8)).astype(np.float32)
    ident = ConvParams(np.eye(2, dtype=np.float32).reshape(1, 1, 2, 2), "transposed", 1, 0)
    assert np.array_equal(transposed_conv2d(x, ident), x)
    assert transposed_conv2d(x, _p2(rng, 2, 3, 2, 2, 0, "transposed")).shape == (3, 16, 16)


@pytest.mark.parametrize("s", [2, 4])
def test_transposed_matches_loops_and_zero_stuffing(s):
    rng = np.random.default_rng(13 + s)
    x = rng.standard_normal((3, 19, 7)).astype(np.float32)
    p = _p2(rng, 3, 4, s, s, 0, "transposed")
    got = transposed_conv2d(x, p)
    np.testing.assert_allclose(got, transposed_conv2d_loops(x, p.weights, s), atol=1e-5)
    # zero-stuffing: insert s-1 zeros between inputs, pad s-1, convolve with the flipped kernel
    C, H, W = x.shape
    stuffed = np.zeros((C, H * s, W * s))
    stuffed[:, ::s, ::s] = x
    padded = np.zeros((C, H * s + s - 1, W * s + s - 1))
    padded[:, s - 1:, s - 1:] = stuffed
    flipped = p.weights[::-1, ::-1]
    ref = conv2d_loops(padded, flipped, 1, 0)
    np.testing.assert_allclose(got, ref, atol=1e-5)


def test_conv2d_bit_identical_across_workers():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((16, 70, 40)).astype(np.float32)
    p = _p2(rng, 16, 8, 3, 1, 1)
    ref = conv2d(x, p, 1)
    for w in (2, 4, 8):
        assert np.array_equal(conv2d(x, p, w), ref)


def test_bilinear_constant_and_single_pixel():
    assert np.array_equal(bilinear_upsample2x(np.full((2, 3, 5), 1.5, np.float32)),
                          np.full((2, 6, 10), 1.5, np.float32))
    assert bilinear_upsample2x(np.array([[[7.0]]], np.float32)).tolist() == [[[7.0, 7.0], [7.0, 7.0]]]


def test_bilinear_hand_evaluated_2x2():
    x = np.array([[[0.0, 1.0], [2.0, 3.0]]], np.float32)
    # source coords per output index: -0.25->0 (clamped), 0.25, 0.75, 1.25->1 (clamped)
    s = [0.0, 0.25, 0.75, 1.0]
    expected = [[2 * sy + sx for sx in s] for sy in s]  # bilinear on f(y, x) = 2y + x is exact
    np.testing.assert_allclose(bilinear_upsample2x(x)[0], expected, atol=1e-7)


def test_bilinear_matches_loops():
    rng = np.random.default_rng(15)
    x = rng.standard_normal((3, 5, 9)).astype(np.float32)
    np.testing.assert_allclose(bilinear_upsample2x(x), bilinear2x_loops(x), atol=1e-6)


def test_conv2d_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(16)
    x = rng.standard_normal((5, 12, 10)).astype(np.float32)
    p = _p2(rng, 5, 7, 3, 2, 1)
    ref = torch.nn.functional.conv2d(torch.from_numpy(x)[None],
                                     torch.from_numpy(p.weights.transpose(3, 2, 0, 1).copy()),
                                     stride=2, padding=1)[0].numpy()
    np.testing.assert_allclose(conv2d(x, p), ref, atol=1e-5)
    up = torch.nn.functional.interpolate(torch.from_numpy(x)[None], scale_factor=2,
                                         mode="bilinear", align_corners=False)[0].numpy()
    np.testing.assert_allclose(bilinear_upsample2x(x), up, atol=1e-5)
