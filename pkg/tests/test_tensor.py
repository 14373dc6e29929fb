import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvnet.tensor import (SingularMatrixError, TensorFormatError, matmul, read_tensor,
                          solve_linear, tensor_bytes, tensor_from_bytes, write_tensor)


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            for k in range(len(b)):
                out[i][j] += a[i][k] * b[k][j]
    return np.array(out)


def test_matmul_identity():
    m = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(matmul(np.eye(3), m), m)


def test_matmul_small():
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    assert np.max(np.abs(matmul(a, b) - naive_matmul(a.tolist(), b.tolist()))) < 1e-12


def test_matmul_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
       st.integers(0, 2 ** 32 - 1))
def test_matmul_associative(m, n, p, q, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(m, n)), rng.normal(size=(n, p)), rng.normal(size=(p, q))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


def test_solve_identity_and_diagonal():
    b = np.random.default_rng(2).normal(size=(4, 3))
    np.testing.assert_array_equal(solve_linear(np.eye(4), b), b)
    np.testing.assert_allclose(solve_linear([[2, 0], [0, 4]], [[2], [4]]), [[1], [1]])


def test_solve_random_residual():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(12, 12)) + 12 * np.eye(12)
    b = rng.normal(size=(12, 2))
    x = solve_linear(a, b)
    assert np.max(np.abs(a @ x - b)) < 1e-9


def test_solve_needs_pivoting():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(solve_linear(a, [3.0, 5.0]), [5.0, 3.0])


def test_solve_singular_names_column():
    a = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]])
    with pytest.raises(SingularMatrixError) as err:
        solve_linear(a, np.ones(3))
    assert err.value.column == 1
    assert "column 1" in str(err.value)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2 ** 32 - 1))
def test_solve_reconstructs_rhs(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n)) + 2 * n * np.eye(n)
    if np.linalg.cond(a) >= 1e6:
        return
    b = rng.normal(size=(n, 3))
    assert np.max(np.abs(matmul(a, solve_linear(a, b)) - b)) < 1e-9


def test_roundtrip_zero(tmp_path):
    path = tmp_path / "z.mvt"
    write_tensor(path, np.zeros((2, 3)))
    t = read_tensor(path)
    assert t.shape == (2, 3) and not t.any()


def test_roundtrip_nonfinite_bits(tmp_path):
    payload = np.array([np.nan, np.inf, -np.inf, -0.0, 1.5])
    odd_nan = np.frombuffer(struct.pack("<Q", 0x7FF8_0000_DEAD_BEEF), dtype="<f8")
    payload = np.concatenate([payload, odd_nan])
    path = tmp_path / "n.mvt"
    write_tensor(path, payload)
    assert read_tensor(path).tobytes() == payload.tobytes()


def test_double_write_is_byte_identical(tmp_path):
    clip = np.random.default_rng(4).uniform(size=(9, 33, 33))
    write_tensor(tmp_path / "a.mvt", clip)
    write_tensor(tmp_path / "b.mvt", clip)
    assert (tmp_path / "a.mvt").read_bytes() == (tmp_path / "b.mvt").read_bytes()
    np.testing.assert_array_equal(read_tensor(tmp_path / "a.mvt"), clip)


def test_layout():
    buf = tensor_bytes(np.arange(6.0).reshape(2, 3))
    assert buf[:4] == b"MVT1"
    assert struct.unpack("<III", buf[4:16]) == (2, 2, 3)
    assert struct.unpack("<6d", buf[16:]) == (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
    assert len(buf) == 16 + 48


@pytest.mark.parametrize("buf", [
    b"MVT2" + struct.pack("<II", 1, 1) + b"\0" * 8,
    b"MVT1" + struct.pack("<II", 1, 2) + b"\0" * 8,
    b"MVT1" + struct.pack("<I", 2) + struct.pack("<I", 4),
    b"MVT1" + struct.pack("<III", 2, 2 ** 31, 2 ** 31),
])
def test_bad_files(buf):
    with pytest.raises(TensorFormatError):
        tensor_from_bytes(buf)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2 ** 32 - 1))
def test_roundtrip_property(dims, seed):
    raw = np.random.default_rng(seed).integers(0, 2 ** 63, size=int(np.prod(dims)),
                                               dtype=np.uint64)
    t = raw.view(np.float64).reshape(dims)
    assert tensor_from_bytes(tensor_bytes(t)).tobytes() == t.tobytes()
