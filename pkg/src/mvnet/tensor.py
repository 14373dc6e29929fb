"""Dense float64 arrays: products, a pivoted linear solver, and the MVT1 file format.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 in C order.
"""

import struct

import numpy as np

MAGIC = b"MVT1"
_MAX_RANK = 32


class SingularMatrixError(ArithmeticError):
    def __init__(self, column):
        super().__init__(f"matrix is singular: no usable pivot in column {column}")
        self.column = column


class TensorFormatError(ValueError):
    pass


def as_tensor(values):
    return np.ascontiguousarray(values, dtype=np.float64)


def _as_matrix(m, name):
    m = as_tensor(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got rank {m.ndim}")
    return m


def matmul(a, b):
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def solve_linear(a, b, tol=1e-12):
    """Solve ``a @ x = b`` by Gaussian elimination with partial pivoting.

    ``b`` may be a vector or a matrix of right-hand sides. Raises
    :class:`SingularMatrixError` when the best available pivot in a column has
    magnitude below ``tol``.
    """
    a = _as_matrix(a, "a").copy()
    b = as_tensor(b)
    vector = b.ndim == 1
    b = b.reshape(-1, 1).copy() if vector else _as_matrix(b, "b").copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"a must be square, got {a.shape}")
    if b.shape[0] != n:
        raise ValueError(f"b has {b.shape[0]} rows, expected {n}")

    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) < tol:
            raise SingularMatrixError(col)
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        factors = a[col + 1:, col] / a[col, col]
        a[col + 1:, col:] -= np.outer(factors, a[col, col:])
        b[col + 1:] -= np.outer(factors, b[col])

    x = np.empty_like(b)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x.ravel() if vector else x


def tensor_bytes(t):
    t = as_tensor(t)
    if t.ndim == 0:
        t = t.reshape(1)
    header = MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.astype("<f8", copy=False).tobytes(order="C")


def tensor_from_bytes(buf):
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic, not an MVT1 tensor")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if rank == 0 or rank > _MAX_RANK:
        raise TensorFormatError(f"unsupported rank {rank}")
    head = 8 + 4 * rank
    if len(buf) < head:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    if 0 in dims:
        raise TensorFormatError("zero-sized dimension")
    count = 1
    for d in dims:
        count *= d
        if count * 8 > len(buf):
            raise TensorFormatError(f"dims {dims} overflow the payload")
    if len(buf) != head + 8 * count:
        raise TensorFormatError(
            f"payload is {len(buf) - head} bytes, expected {8 * count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=head)
    return data.astype(np.float64).reshape(dims)


def write_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(t))


def read_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
