"""Natural cubic spline resampling expressed as a fixed linear map on frames.

Every pixel's time series ``y`` (one value per knot) is interpolated at
query times ``u`` by ``W @ y`` where ``W = R A^-1 T`` depends only on the
knot and query positions:

* ``A`` (4N x 4N) stacks the interpolation, C1, C2 and natural-boundary
  constraints on the per-segment coefficients,
* ``T`` (4N x (N+1)) routes the knot values onto the interpolation rows,
* ``R`` (M x 4N) evaluates the owning segment polynomial at each query.

Segment ``n`` is ``p[4n] + p[4n+1] t + p[4n+2] t^2 + p[4n+3] t^3`` with the
local variable ``t = x - x_n``.
"""

import dataclasses
from fractions import Fraction

import numpy as np

from .tensor import matmul, solve_linear


@dataclasses.dataclass(frozen=True)
class SplineSystem:
    knots: np.ndarray
    queries: np.ndarray
    A: np.ndarray
    T: np.ndarray
    R: np.ndarray
    W: np.ndarray


def parse_rational(text):
    """Parse ``"2/3"``, ``"0.5"`` or ``"1"`` into an exact :class:`Fraction`."""
    if isinstance(text, Fraction):
        return text
    if isinstance(text, (int, float)):
        return Fraction(text)
    text = str(text).strip()
    try:
        if "/" in text:
            num, den = text.split("/")
            return Fraction(int(num), int(den))
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"not a rational number: {text!r}") from exc


def parse_number_list(text):
    return [parse_rational(tok) for tok in str(text).split(",") if tok.strip()]


def check_knots(knots):
    x = np.asarray([float(k) for k in knots], dtype=np.float64)
    if x.ndim != 1 or x.size < 3:
        raise ValueError("need at least 3 knots")
    if not np.all(np.isfinite(x)):
        raise ValueError("knots must be finite")
    if np.any(np.diff(x) <= 0):
        raise ValueError("knots must be strictly increasing")
    return x


def check_queries(knots, queries):
    x = check_knots(knots)
    u = np.asarray([float(q) for q in queries], dtype=np.float64).ravel()
    if u.size == 0:
        raise ValueError("need at least one query time")
    bad = (u < x[0]) | (u > x[-1]) | ~np.isfinite(u)
    if np.any(bad):
        raise ValueError(
            f"query {u[bad][0]!r} outside the knot span [{x[0]}, {x[-1]}]")
    return x, u


def build_constraint_system(knots):
    x = check_knots(knots)
    n_seg = x.size - 1
    h = np.diff(x)
    A = np.zeros((4 * n_seg, 4 * n_seg))
    T = np.zeros((4 * n_seg, n_seg + 1))

    # interpolation at both ends of every segment
    for n in range(n_seg):
        c = 4 * n
        A[2 * n, c] = 1.0
        T[2 * n, n] = 1.0
        A[2 * n + 1, c:c + 4] = [1.0, h[n], h[n] ** 2, h[n] ** 3]
        T[2 * n + 1, n + 1] = 1.0

    # first and second derivative continuity at interior knots
    row = 2 * n_seg
    for k in range(n_seg - 1):
        c = 4 * k
        A[row, c:c + 4] = [0.0, 1.0, 2.0 * h[k], 3.0 * h[k] ** 2]
        A[row, c + 5] = -1.0
        A[row + 1, c:c + 4] = [0.0, 0.0, 2.0, 6.0 * h[k]]
        A[row + 1, c + 6] = -2.0
        row += 2

    # natural ends
    A[row, 2] = 2.0
    last = 4 * (n_seg - 1)
    A[row + 1, last:last + 4] = [0.0, 0.0, 2.0, 6.0 * h[-1]]
    return A, T


def segment_index(knots, queries):
    x, u = check_queries(knots, queries)
    k = np.searchsorted(x, u, side="right") - 1
    return np.minimum(k, x.size - 2)


def build_evaluation_matrix(knots, queries):
    x, u = check_queries(knots, queries)
    k = segment_index(x, u)
    R = np.zeros((u.size, 4 * (x.size - 1)))
    t = u - x[k]
    for j in range(u.size):
        R[j, 4 * k[j]:4 * k[j] + 4] = [1.0, t[j], t[j] ** 2, t[j] ** 3]
    return R


def spline_system(knots, queries):
    x, u = check_queries(knots, queries)
    A, T = build_constraint_system(x)
    R = build_evaluation_matrix(x, u)
    W = matmul(R, solve_linear(A, T))
    return SplineSystem(x, u, A, T, R, W)


def spline_weights(knots, queries):
    """Return the ``len(queries) x len(knots)`` resampling matrix.

    A query that coincides with a knot gets an exact one-hot row: the
    interpolation constraint pins the value there, and snapping removes the
    last-bit rounding of the solve so identity resampling is bit-exact.
    """
    sys_ = spline_system(knots, queries)
    W = sys_.W.copy()
    for j, q in enumerate(sys_.queries):
        hit = np.flatnonzero(sys_.knots == q)
        if hit.size:
            W[j] = 0.0
            W[j, hit[0]] = 1.0
    return W


def spline_coefficients(knots, values):
    """Per-segment coefficients for one signal, shape ``(N, 4)``."""
    A, T = build_constraint_system(knots)
    p = solve_linear(A, T @ np.asarray(values, dtype=np.float64))
    return p.reshape(-1, 4)


def velocity_queries(n_frames, factor):
    """Query times that replay the first ``factor`` of a clip at ``1/factor`` speed.

    Knots are the frame indices ``0..n_frames-1``; the ``j``-th output frame
    sits at time ``j * factor``.
    """
    factor = parse_rational(factor)
    if int(n_frames) != n_frames or n_frames < 3:
        raise ValueError("n_frames must be an integer >= 3")
    if not 0 < factor <= 1:
        raise ValueError(f"factor must lie in (0, 1], got {factor}")
    return np.array([float(j * factor) for j in range(int(n_frames))])


def velocity_weights(n_frames, factor):
    return spline_weights(np.arange(n_frames, dtype=np.float64),
                          velocity_queries(n_frames, factor))


def resample_frames(frames, w):
    frames = np.asarray(frames, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != frames.shape[0]:
        raise ValueError(
            f"weights {w.shape} do not match {frames.shape[0]} input frames")
    out = np.tensordot(w, frames, axes=(1, 0))
    return np.ascontiguousarray(out)


def resample_clip(clip, w):
    """Apply ``w`` along the time axis of a clip (or a bare ``[T, ...]`` array)."""
    if hasattr(clip, "frames"):
        return dataclasses.replace(clip, frames=resample_frames(clip.frames, w))
    return resample_frames(clip, w)
