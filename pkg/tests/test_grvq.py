import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitpack import unpack_indices
from errors import BadSubvectorDim, DimMismatch, IndexOutOfRange, InvalidSpec, TokenOutOfRange, TooFewPoints
from grvq import (
    Codebook,
    GroupCode,
    GrvqParams,
    assign_nearest,
    derive_seed,
    embed_lookup,
    grvq_compress,
    grvq_reconstruct,
    group_residual_norms,
    kmeans,
    kmeans_inertia,
    partition_groups,
    reshape_to_subvectors,
    rvq_decode_group,
    rvq_encode_group,
)
from tensor_io import EmbeddingMatrix, gen_synthetic


def _brute_force_nearest(points, centroids):
    """逐点逐中心线性扫描"""
    out = []
    for x in points.astype(np.float64):
        best, best_d = 0, None
        for k, c in enumerate(centroids.astype(np.float64)):
            d = 0.0
            for j in range(x.shape[0]):
                diff = x[j] - c[j]
                d += diff * diff
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


# ---------------------------------------------------------------------------
# 子向量视图与分组
# ---------------------------------------------------------------------------

def test_reshape_to_subvectors_row_order():
    M = np.arange(8, dtype=np.float32).reshape(2, 4)
    view = reshape_to_subvectors(M, 2)
    np.testing.assert_array_equal(view, [[0, 1], [2, 3], [4, 5], [6, 7]])


def test_reshape_requires_divisible_n():
    with pytest.raises(BadSubvectorDim):
        reshape_to_subvectors(np.zeros((3, 10), dtype=np.float32), 4)


@given(V=st.integers(1, 20), per_token=st.integers(1, 6), h=st.integers(1, 5))
@settings(max_examples=40, deadline=None)
def test_subvector_index_property(V, per_token, h):
    n = per_token * h
    M = np.arange(V * n, dtype=np.float32).reshape(V, n)
    view = reshape_to_subvectors(M, h)
    assert view.shape == (V * per_token, h)
    i, q = V - 1, per_token - 1
    np.testing.assert_array_equal(view[i * per_token + q], M[i, q * h:(q + 1) * h])


def test_partition_groups_with_ragged_tail():
    view = np.zeros((10, 2), dtype=np.float32)
    blocks = partition_groups(view, 4)
    assert [b.shape[0] for b in blocks] == [4, 4, 2]


def test_params_validate():
    with pytest.raises(InvalidSpec):
        GrvqParams(kappa=4, g=8).validate()
    with pytest.raises(InvalidSpec):
        GrvqParams(L=0).validate()
    with pytest.raises(InvalidSpec):
        GrvqParams(kappa=9).validate()
    with pytest.raises(BadSubvectorDim):
        GrvqParams(h=3).check_shape(4, 8)


def test_strict_grouping_rejects_ragged_tail():
    # 160·16/4 = 640 个子向量
    GrvqParams(kappa=4, h=4, g=64, allow_ragged=False).check_shape(160, 16)
    GrvqParams(kappa=4, h=4, g=100).check_shape(160, 16)
    with pytest.raises(InvalidSpec):
        GrvqParams(kappa=4, h=4, g=100, allow_ragged=False).check_shape(160, 16)


def test_group_count_rounds_up():
    assert GrvqParams(h=8, g=1024).group_count(128256, 3072) == 48096
    assert GrvqParams(h=2, g=4).group_count(5, 4) == 3


def test_derive_seed_depends_on_position_only():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert len({derive_seed(0, g, l) for g in range(4) for l in range(4)}) == 16
    assert derive_seed(1, 0, 0) != derive_seed(0, 0, 0)


# ---------------------------------------------------------------------------
# 最近中心
# ---------------------------------------------------------------------------

def test_assign_nearest_examples():
    cb = Codebook(np.array([[0, 0], [10, 10]], dtype=np.float32))
    np.testing.assert_array_equal(assign_nearest(np.array([[1, 1], [9, 9]], dtype=np.float32), cb), [0, 1])


def test_assign_nearest_tie_picks_lowest_index():
    cb = Codebook(np.array([[1, 0], [-1, 0]], dtype=np.float32))
    assert assign_nearest(np.zeros((1, 2), dtype=np.float32), cb)[0] == 0


def test_assign_nearest_dim_mismatch():
    cb = Codebook(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(DimMismatch):
        assign_nearest(np.zeros((1, 2), dtype=np.float32), cb)


@given(
    seed=st.integers(0, 2 ** 32 - 1),
    P=st.integers(1, 30),
    K=st.integers(1, 16),
    h=st.integers(1, 8),
)
@settings(max_examples=100, deadline=None)
def test_assign_nearest_matches_exhaustive_scan(seed, P, K, h):
    rng = np.random.default_rng(seed)
    points = rng.standard_normal((P, h)).astype(np.float32)
    centroids = rng.standard_normal((K, h)).astype(np.float32)
    # 一部分点与中心重合，制造平局
    if K > 1 and P > 1:
        points[0] = centroids[K - 1]
        centroids[0] = centroids[K - 1]
    got = assign_nearest(points, Codebook(centroids))
    np.testing.assert_array_equal(got, _brute_force_nearest(points, centroids))


def test_assign_nearest_oracle_10000_cases():
    rng = np.random.default_rng(2024)
    points = rng.standard_normal((10_000, 4)).astype(np.float32)
    centroids = rng.standard_normal((16, 4)).astype(np.float32)
    got = assign_nearest(points, Codebook(centroids))

    # 向量化的逐维累加与标量扫描相同
    d = np.zeros((10_000, 16))
    for j in range(4):
        diff = points[:, j, None].astype(np.float64) - centroids[None, :, j].astype(np.float64)
        d += diff * diff
    np.testing.assert_array_equal(got, d.argmin(axis=1))
    np.testing.assert_array_equal(got[:200], _brute_force_nearest(points[:200], centroids))


# ---------------------------------------------------------------------------
# K-Means
# ---------------------------------------------------------------------------

def test_kmeans_four_corners():
    corners = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.float32)
    points = np.repeat(corners, 25, axis=0)
    cb = kmeans(points, 4, seed=5)
    got = sorted(map(tuple, cb.centroids.tolist()))
    assert got == sorted(map(tuple, corners.tolist()))


def test_kmeans_identical_points():
    points = np.tile(np.array([[0.3, -1.7]], dtype=np.float32), (10, 1))
    cb = kmeans(points, 1)
    np.testing.assert_array_equal(cb.centroids, points[:1])


def test_kmeans_single_centroid_is_the_mean():
    points = np.random.default_rng(4).standard_normal((50, 3)).astype(np.float32)
    cb = kmeans(points, 1)
    np.testing.assert_allclose(cb.centroids[0], points.astype(np.float64).mean(axis=0), rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize('seed', range(5))
def test_kmeans_separated_gaussians_reach_oracle_inertia(seed):
    rng = np.random.default_rng(seed)
    centers = np.array([[-10, -10], [-10, 10], [10, -10], [10, 10]], dtype=np.float64)
    labels = np.repeat(np.arange(4), 16)
    points = (centers[labels] + 0.5 * rng.standard_normal((64, 2))).astype(np.float32)

    # 簇间距离远大于噪声，按生成标签划分就是最优划分
    pts64 = points.astype(np.float64)
    oracle = sum(((pts64[labels == k] - pts64[labels == k].mean(axis=0)) ** 2).sum() for k in range(4))

    cb = kmeans(points, 4, seed=seed)
    assert kmeans_inertia(points, cb) <= oracle * 1.01


def test_kmeans_too_few_points():
    with pytest.raises(TooFewPoints):
        kmeans(np.zeros((3, 2), dtype=np.float32), 5)


def test_kmeans_is_deterministic():
    pts = np.random.default_rng(0).standard_normal((300, 4)).astype(np.float32)
    a = kmeans(pts, 8, seed=42)
    b = kmeans(pts, 8, seed=42)
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_kmeans_duplicate_heavy_data_recovers_every_point():
    # 只有 5 个不同的点，K=8：多余的中心是空簇，不能影响精确性
    base = np.random.default_rng(1).standard_normal((5, 3)).astype(np.float32)
    points = np.repeat(base, 20, axis=0)
    cb = kmeans(points, 8, seed=3)
    recon = cb.centroids[assign_nearest(points, cb)]
    np.testing.assert_array_equal(recon, points)


# ---------------------------------------------------------------------------
# 单组 RVQ
# ---------------------------------------------------------------------------

def test_single_level_exact_when_k_distinct():
    rng = np.random.default_rng(9)
    distinct = rng.standard_normal((16, 8)).astype(np.float32)
    block = distinct[rng.integers(0, 16, size=1024)]
    block[:16] = distinct
    code = rvq_encode_group(block, GrvqParams(L=1, kappa=4, h=8, g=1024))
    np.testing.assert_array_equal(rvq_decode_group(code), block)


def test_second_level_reduces_error():
    block = np.random.default_rng(4).standard_normal((512, 8)).astype(np.float32)
    norms = group_residual_norms(block, rvq_encode_group(block, GrvqParams(L=2, kappa=4, h=8, g=512)))
    assert norms[1] < norms[0]


def test_decode_rejects_bad_index():
    cb = Codebook(np.zeros((4, 2), dtype=np.float32))
    code = GroupCode(codebooks=[cb], indices=np.array([[4]]))
    with pytest.raises(IndexOutOfRange):
        rvq_decode_group(code)


def test_small_group_needs_permission():
    block = np.zeros((3, 2), dtype=np.float32)
    params = GrvqParams(L=1, kappa=2, h=2, g=4)
    with pytest.raises(TooFewPoints):
        rvq_encode_group(block, params)
    code = rvq_encode_group(block + 1, params, allow_small=True)
    np.testing.assert_array_equal(rvq_decode_group(code), block + 1)


def test_f16_storage_rounds_codebooks():
    block = np.random.default_rng(8).standard_normal((64, 4)).astype(np.float32)
    code = rvq_encode_group(block, GrvqParams(L=2, kappa=3, h=4, g=64), storage_bits=16)
    for cb in code.codebooks:
        np.testing.assert_array_equal(cb.centroids.astype(np.float16).astype(np.float32), cb.centroids)


@pytest.mark.slow
def test_residual_error_strictly_decreases_with_levels():
    rng = np.random.default_rng(77)
    params = {L: GrvqParams(L=L, kappa=4, h=8, g=1024) for L in (1, 2, 3)}
    for trial in range(20):
        block = rng.standard_normal((1024, 8)).astype(np.float32)
        errors = []
        for L in (1, 2, 3):
            recon = rvq_decode_group(rvq_encode_group(block, params[L], group_index=trial))
            errors.append(float(((block.astype(np.float64) - recon) ** 2).sum()))
        assert errors[1] < errors[0] or errors[0] == 0
        assert errors[2] < errors[1] or errors[1] == 0


def test_level_seeds_do_not_depend_on_L():
    block = np.random.default_rng(6).standard_normal((256, 4)).astype(np.float32)
    short = rvq_encode_group(block, GrvqParams(L=1, kappa=3, h=4, g=256))
    long = rvq_encode_group(block, GrvqParams(L=3, kappa=3, h=4, g=256))
    np.testing.assert_array_equal(short.codebooks[0].centroids, long.codebooks[0].centroids)
    np.testing.assert_array_equal(short.indices[:, 0], long.indices[:, 0])


# ---------------------------------------------------------------------------
# 整个矩阵
# ---------------------------------------------------------------------------

def test_compress_model_shapes(small_matrix):
    params = GrvqParams(L=2, kappa=3, h=4, g=64)
    model = grvq_compress(small_matrix, params)
    assert model.group_count == params.group_count(200, 16) == 13
    assert model.codebook_tensor.shape == (13, 2, 8, 4)
    assert model.index_matrix.shape == (800, 2)
    np.testing.assert_array_equal(unpack_indices(model.packed_indices), model.index_matrix.reshape(-1))
    assert grvq_reconstruct(model).shape == (200, 16)


def test_exact_when_each_group_has_few_distinct_subvectors():
    rng = np.random.default_rng(21)
    patterns = rng.standard_normal((16, 8)).astype(np.float32)
    view = patterns[rng.integers(0, 16, size=(4096,))]
    M = EmbeddingMatrix(view.reshape(512, 64))
    model = grvq_compress(M, GrvqParams(L=1, kappa=4, h=8, g=1024))
    recon = grvq_reconstruct(model)
    assert float(((recon - M.data) ** 2).mean()) == 0.0


def test_result_does_not_depend_on_threads(small_matrix):
    params = GrvqParams(L=2, kappa=3, h=4, g=64, seed=5)
    one = grvq_compress(small_matrix, params, threads=1)
    four = grvq_compress(small_matrix, params, threads=4)
    assert one.codebook_tensor.tobytes() == four.codebook_tensor.tobytes()
    assert one.packed_indices == four.packed_indices


def test_compress_f16_source_rounds_codebooks():
    M = gen_synthetic(V=64, n=8, clusters=4, noise_sigma=0.1, seed=2, dtype='f16')
    model = grvq_compress(M, GrvqParams(L=2, kappa=3, h=4, g=32))
    assert model.storage_bits == 16
    cbt = model.codebook_tensor
    np.testing.assert_array_equal(cbt.astype(np.float16).astype(np.float32), cbt)


def test_embed_lookup_matches_reconstruction(small_matrix):
    model = grvq_compress(small_matrix, GrvqParams(L=2, kappa=3, h=4, g=64))
    recon = grvq_reconstruct(model)
    for t in np.random.default_rng(0).integers(0, 200, size=100):
        assert embed_lookup(model, None, int(t)).tobytes() == recon[t].tobytes()


def test_embed_lookup_token_range(small_matrix):
    model = grvq_compress(small_matrix, GrvqParams(L=1, kappa=2, h=4, g=64))
    with pytest.raises(TokenOutOfRange):
        embed_lookup(model, None, 200)
    with pytest.raises(TokenOutOfRange):
        embed_lookup(model, None, -1)
