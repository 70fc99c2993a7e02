import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import InvalidSpec, IoFailure, MalformedHeader, NonFiniteData, ShapeMismatch
from grvq import kmeans, kmeans_inertia
from tensor_io import EMB_MAGIC, EmbeddingMatrix, gen_synthetic, load_matrix, save_matrix


def _raw_container(header: dict, payload: bytes) -> bytes:
    h = json.dumps(header).encode('utf-8')
    return EMB_MAGIC + struct.pack('<I', len(h)) + h + payload


def test_load_small_container(tmp_path):
    path = tmp_path / 'm.emb'
    data = np.arange(1, 9, dtype='<f4').tobytes()
    path.write_bytes(_raw_container({'v': 4, 'n': 2, 'dtype': 'f32'}, data))

    M = load_matrix(path)
    assert M.shape == (4, 2)
    assert M.source_precision == 32
    np.testing.assert_array_equal(M.data[2], [5, 6])


def test_short_payload_is_shape_mismatch(tmp_path):
    path = tmp_path / 'm.emb'
    path.write_bytes(_raw_container({'v': 4, 'n': 2, 'dtype': 'f32'}, np.zeros(7, '<f4').tobytes()))
    with pytest.raises(ShapeMismatch):
        load_matrix(path)


def test_f16_infinity_is_rejected(tmp_path):
    path = tmp_path / 'm.emb'
    payload = np.array([1.0, 2.0], dtype='<f2').tobytes() + struct.pack('<H', 0x7C00) + np.zeros(1, '<f2').tobytes()
    path.write_bytes(_raw_container({'v': 2, 'n': 2, 'dtype': 'f16'}, payload))
    with pytest.raises(NonFiniteData):
        load_matrix(path)


@pytest.mark.parametrize('raw', [
    b'NOTMAGIC' + b'\x00' * 8,
    EMB_MAGIC + struct.pack('<I', 3) + b'{{{',
    EMB_MAGIC + struct.pack('<I', 500) + b'{}',
])
def test_malformed_headers(tmp_path, raw):
    path = tmp_path / 'bad.emb'
    path.write_bytes(raw)
    with pytest.raises(MalformedHeader):
        load_matrix(path)


def test_unknown_dtype_in_header(tmp_path):
    path = tmp_path / 'm.emb'
    path.write_bytes(_raw_container({'v': 1, 'n': 1, 'dtype': 'bf16'}, b'\x00\x00'))
    with pytest.raises(MalformedHeader):
        load_matrix(path)


def test_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_matrix(tmp_path / 'nope.emb')


def test_save_load_f32_exact(tmp_path, rng):
    M = EmbeddingMatrix(rng.standard_normal((3, 5)).astype(np.float32))
    path = tmp_path / 'm.emb'
    save_matrix(M, path, dtype='f32')

    back = load_matrix(path)
    assert back.shape == (3, 5)
    np.testing.assert_array_equal(back.data, M.data)

    header_len = struct.unpack('<I', path.read_bytes()[8:12])[0]
    header = json.loads(path.read_bytes()[12:12 + header_len])
    assert (header['v'], header['n']) == (3, 5)


def test_save_load_same_dtype_is_byte_identical(tmp_path, rng):
    M = EmbeddingMatrix(rng.standard_normal((6, 4)).astype(np.float32))
    first, second = tmp_path / 'a.emb', tmp_path / 'b.emb'
    save_matrix(M, first, dtype='f16')
    save_matrix(load_matrix(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_f16_rounds_to_nearest_even(tmp_path):
    M = EmbeddingMatrix(np.array([[1.0000001, -2.5]], dtype=np.float32))
    path = tmp_path / 'm.emb'
    save_matrix(M, path, dtype='f16')
    back = load_matrix(path)
    assert back.dtype == 'f16'
    assert back.source_precision == 16
    np.testing.assert_array_equal(back.data, [[1.0, -2.5]])


def test_f16_overflow_is_reported(tmp_path):
    M = EmbeddingMatrix(np.array([[1e6]], dtype=np.float32))
    with pytest.raises(NonFiniteData):
        save_matrix(M, tmp_path / 'm.emb', dtype='f16')


def test_save_to_missing_directory(tmp_path):
    M = EmbeddingMatrix(np.ones((1, 1), dtype=np.float32))
    with pytest.raises(IoFailure):
        save_matrix(M, tmp_path / 'missing' / 'm.emb')


def test_embedding_matrix_rejects_nan():
    with pytest.raises(NonFiniteData):
        EmbeddingMatrix(np.array([[np.nan, 1.0]]))


@given(
    V=st.integers(1, 12),
    n=st.integers(1, 12),
    seed=st.integers(0, 2 ** 32 - 1),
)
@settings(max_examples=25, deadline=None)
def test_round_trip_property(tmp_path_factory, V, n, seed):
    M = EmbeddingMatrix(np.random.default_rng(seed).standard_normal((V, n)).astype(np.float32))
    path = tmp_path_factory.mktemp('rt') / 'm.emb'
    save_matrix(M, path)
    assert load_matrix(path).data.tobytes() == M.data.tobytes()


def test_zero_noise_gives_exact_cluster_rows():
    M = gen_synthetic(V=100, n=8, clusters=4, noise_sigma=0, seed=7)
    assert np.unique(M.data, axis=0).shape[0] == 4


def test_gen_synthetic_is_deterministic():
    a = gen_synthetic(V=50, n=6, clusters=5, noise_sigma=0.1, seed=11)
    b = gen_synthetic(V=50, n=6, clusters=5, noise_sigma=0.1, seed=11)
    assert a.data.tobytes() == b.data.tobytes()


def test_gen_synthetic_f16_values_are_representable():
    M = gen_synthetic(V=20, n=4, clusters=3, noise_sigma=0.1, seed=1, dtype='f16')
    np.testing.assert_array_equal(M.data.astype(np.float16).astype(np.float32), M.data)


def test_clustered_data_has_low_inertia():
    M = gen_synthetic(V=1000, n=16, clusters=16, noise_sigma=0.05, seed=1)
    cb = kmeans(M.data, 16, tol=1e-4, max_iter=100, seed=0)
    total = float(((M.data.astype(np.float64) - M.data.mean(axis=0)) ** 2).sum())
    assert kmeans_inertia(M.data, cb) < 0.1 * total


@pytest.mark.parametrize('kwargs', [
    dict(V=4, n=2, clusters=5, noise_sigma=0.0, seed=0),
    dict(V=4, n=2, clusters=2, noise_sigma=-1.0, seed=0),
    dict(V=0, n=2, clusters=1, noise_sigma=0.0, seed=0),
])
def test_gen_synthetic_validates(kwargs):
    with pytest.raises(InvalidSpec):
        gen_synthetic(**kwargs)
