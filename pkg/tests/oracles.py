"""Independent reference computations shared by the tests."""

import numpy as np


def oracle_spline(x, y, u):
    """Natural cubic spline through (x, y) evaluated at u.

    Built independently of the library: global-power basis (coefficients of
    x**i rather than (x - x_n)**i), numpy's LAPACK solver, direct
    polynomial evaluation.
    """
    x, y, u = (np.asarray(v, dtype=float) for v in (x, y, u))
    n = len(x) - 1
    M = np.zeros((4 * n, 4 * n))
    rhs = np.zeros(4 * n)
    row = 0

    def powers(t, deriv):
        out = np.zeros(4)
        for i in range(deriv, 4):
            coef = 1.0
            for d in range(deriv):
                coef *= i - d
            out[i] = coef * t ** (i - deriv)
        return out

    for k in range(n):
        M[row, 4 * k:4 * k + 4] = powers(x[k], 0)
        rhs[row] = y[k]
        M[row + 1, 4 * k:4 * k + 4] = powers(x[k + 1], 0)
        rhs[row + 1] = y[k + 1]
        row += 2
    for k in range(n - 1):
        for d in (1, 2):
            M[row, 4 * k:4 * k + 4] = powers(x[k + 1], d)
            M[row, 4 * k + 4:4 * k + 8] = -powers(x[k + 1], d)
            row += 1
    M[row, 0:4] = powers(x[0], 2)
    M[row + 1, 4 * n - 4:] = powers(x[n], 2)
    c = np.linalg.solve(M, rhs).reshape(n, 4)
    out = []
    for q in u:
        k = min(max(np.searchsorted(x, q, side="right") - 1, 0), n - 1)
        out.append(sum(c[k, i] * q ** i for i in range(4)))
    return np.array(out)


def naive_conv3d(x, w, b, stride, stride_t):
    """Valid 3-D convolution by explicit loops; x [B,T,C,H,W], w [N,C,ft,f,f]."""
    B, T, C, H, W = x.shape
    N, _, ft, f, _ = w.shape
    To, Ho, Wo = (T - ft) // stride_t + 1, (H - f) // stride + 1, (W - f) // stride + 1
    out = np.zeros((B, To, N, Ho, Wo))
    for bi in range(B):
        for t in range(To):
            for n in range(N):
                for i in range(Ho):
                    for j in range(Wo):
                        acc = b[n]
                        for c in range(C):
                            for dt in range(ft):
                                for di in range(f):
                                    for dj in range(f):
                                        acc += (w[n, c, dt, di, dj]
                                                * x[bi, t * stride_t + dt, c,
                                                    i * stride + di, j * stride + dj])
                        out[bi, t, n, i, j] = acc
    return out


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def layer_grad_errors(layer, x, rng, h=1e-5):
    """Relative errors of a layer's analytic input and parameter gradients.

    The scalar probed is ``sum(forward(x) * r)`` for a fixed random ``r``.
    """
    out = layer.forward(x)
    r = rng.normal(size=out.shape)
    layer.zero_grad()
    layer.forward(x)
    gx = layer.backward(r)
    analytic = {k: v.copy() for k, v in layer.grads.items()}

    def f():
        return float(np.sum(layer.forward(x) * r))

    errors = {"input": rel_error(gx, numeric_grad(f, x, h))}
    for key, p in layer.params.items():
        errors[key] = rel_error(analytic[key], numeric_grad(f, p, h))
    return errors
