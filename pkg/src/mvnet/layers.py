"""Layers with hand-written forward and backward passes.

Activations are float64 arrays shaped ``[batch, time, channels, height, width]``
for the spatio-temporal layers and ``[batch, features]`` after a fully
connected layer. Each layer caches what its backward pass needs during
``forward``; calling ``backward`` without a preceding ``forward`` is an error.
Parameter gradients accumulate until :meth:`Layer.zero_grad` is called.
"""

import math
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import read_tensor, write_tensor


def conv_out(size, kernel, stride):
    return (size - kernel) // stride + 1


def deconv_out(size, kernel, stride):
    return (size - 1) * stride + kernel


class Layer:
    kind = "layer"

    def __init__(self, relu=False):
        self.relu = relu
        self.name = self.kind
        self.params = {}
        self.grads = {}
        self._cache = None

    # shapes ------------------------------------------------------------
    def param_shapes(self):
        return {}

    @property
    def param_count(self):
        return sum(math.prod(s) for s in self.param_shapes().values())

    def output_shape(self, input_shape):
        raise NotImplementedError

    # parameters --------------------------------------------------------
    def init_params(self, rng, init_std=0.01):
        for key, shape in self.param_shapes().items():
            if key == "weights":
                fan_in = math.prod(shape[1:]) if len(shape) > 1 else 1
                std = math.sqrt(2.0 / fan_in) if init_std == "he" else float(init_std)
                self.params[key] = rng.normal(0.0, std, size=shape)
            else:
                self.params[key] = np.zeros(shape)
        self.zero_grad()

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _check_allocated(self):
        if self.param_shapes() and not self.params:
            raise RuntimeError(f"{self.name}: parameters were never allocated")

    # passes ------------------------------------------------------------
    def forward(self, x):
        self._check_allocated()
        z = self._forward(np.asarray(x, dtype=np.float64))
        if self.relu:
            mask = z > 0
            z = z * mask
        else:
            mask = None
        self._mask = mask
        return z

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called before forward")
        grad = np.asarray(grad, dtype=np.float64)
        if self._mask is not None:
            grad = grad * self._mask
        return self._backward(grad)

    def _forward(self, x):
        raise NotImplementedError

    def _backward(self, grad):
        raise NotImplementedError

    def describe(self):
        return self.kind


class Velocity(Layer):
    """Per-pixel linear map along time: ``out[:, j] = sum_i W[j, i] in[:, i] + b[j]``."""

    kind = "velocity"

    def __init__(self, n_in, n_out, init_weights=None, factor=None):
        super().__init__(relu=False)
        self.n_in, self.n_out = n_in, n_out
        self.factor = factor
        self.init_weights = init_weights

    def param_shapes(self):
        return {"weights": (self.n_out, self.n_in), "biases": (self.n_out,)}

    def init_params(self, rng=None, init_std=None):
        w = self.init_weights
        if w is None:
            w = np.eye(self.n_out, self.n_in)
        w = np.array(w, dtype=np.float64)
        if w.shape != (self.n_out, self.n_in):
            raise ValueError(f"velocity weights must be {(self.n_out, self.n_in)}")
        self.params = {"weights": w, "biases": np.zeros(self.n_out)}
        self.zero_grad()

    def output_shape(self, input_shape):
        if input_shape[0] != self.n_in:
            raise ValueError(
                f"velocity layer expects {self.n_in} frames, got {input_shape[0]}")
        return (self.n_out,) + tuple(input_shape[1:])

    def _forward(self, x):
        if x.ndim < 2 or x.shape[1] != self.n_in:
            raise ValueError(
                f"velocity layer expects temporal extent {self.n_in}, got shape {x.shape}")
        self._cache = x
        out = np.tensordot(x, self.params["weights"], axes=([1], [1]))
        out = np.moveaxis(out, -1, 1)
        bshape = (1, self.n_out) + (1,) * (x.ndim - 2)
        return out + self.params["biases"].reshape(bshape)

    def _backward(self, grad):
        x = self._cache
        other = tuple(a for a in range(x.ndim) if a != 1)
        self.grads["weights"] += np.tensordot(grad, x, axes=(other, other))
        self.grads["biases"] += grad.sum(axis=other)
        out = np.tensordot(grad, self.params["weights"], axes=([1], [0]))
        return np.moveaxis(out, -1, 1)

    def describe(self):
        return f"V({self.factor})" if self.factor is not None else "V"


def _im2col(x, ft, f, st, s, out_dims):
    """Patches of ``x`` [B,T,C,H,W] as rows ``[B*To*Ho*Wo, C*ft*f*f]``."""
    To, Ho, Wo = out_dims
    win = sliding_window_view(x, (ft, f, f), axis=(1, 3, 4))
    win = win[:, :st * (To - 1) + 1:st, :, :s * (Ho - 1) + 1:s, :s * (Wo - 1) + 1:s]
    win = win.transpose(0, 1, 3, 4, 2, 5, 6, 7)
    return win.reshape(x.shape[0] * To * Ho * Wo, -1)


def _col2im(cols, in_dims, ft, f, st, s, out_dims, batch):
    """Adjoint of :func:`_im2col`: scatter-add patch rows into ``[B,T,C,H,W]``."""
    T, C, H, W = in_dims
    To, Ho, Wo = out_dims
    cols = cols.reshape(batch, To, Ho, Wo, C, ft, f, f)
    out = np.zeros((batch, T, C, H, W))
    for dt in range(ft):
        ts = slice(dt, dt + st * (To - 1) + 1, st)
        for di in range(f):
            hs = slice(di, di + s * (Ho - 1) + 1, s)
            for dj in range(f):
                ws = slice(dj, dj + s * (Wo - 1) + 1, s)
                out[:, ts, :, hs, ws] += cols[..., dt, di, dj].transpose(0, 1, 4, 2, 3)
    return out


def conv3d_linear(x, weights, f_t, stride, stride_t):
    """Bias-free valid convolution; ``weights`` is ``[N, C, ft, f, f]``."""
    N, C, ft, f, _ = weights.shape
    B, T, _, H, W = x.shape
    out_dims = (conv_out(T, ft, stride_t), conv_out(H, f, stride), conv_out(W, f, stride))
    cols = _im2col(x, ft, f, stride_t, stride, out_dims)
    z = cols @ weights.reshape(N, -1).T
    return z.reshape(B, *out_dims, N).transpose(0, 1, 4, 2, 3)


def conv3d_transpose_linear(y, weights, stride, stride_t, out_dims):
    """Adjoint of :func:`conv3d_linear` for an input of size ``out_dims`` = (T, H, W)."""
    N, C, ft, f, _ = weights.shape
    B, Ti, _, Hi, Wi = y.shape
    ym = y.transpose(0, 1, 3, 4, 2).reshape(-1, N)
    cols = ym @ weights.reshape(N, -1)
    T, H, W = out_dims
    return _col2im(cols, (T, C, H, W), ft, f, stride_t, stride, (Ti, Hi, Wi), B)


class Conv3D(Layer):
    kind = "conv"

    def __init__(self, in_channels, filters, size, stride, size_t=1, stride_t=1, relu=True):
        super().__init__(relu=relu)
        self.in_channels, self.filters = in_channels, filters
        self.size, self.stride = size, stride
        self.size_t, self.stride_t = size_t, stride_t

    def param_shapes(self):
        return {"weights": (self.filters, self.in_channels, self.size_t, self.size, self.size),
                "biases": (self.filters,)}

    def output_shape(self, input_shape):
        T, C, H, W = input_shape
        if C != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {C}")
        if T < self.size_t or H < self.size or W < self.size:
            raise ValueError(
                f"{self.name}: kernel ({self.size_t},{self.size},{self.size}) "
                f"exceeds input ({T},{H},{W})")
        return (conv_out(T, self.size_t, self.stride_t), self.filters,
                conv_out(H, self.size, self.stride), conv_out(W, self.size, self.stride))

    def _forward(self, x):
        B = x.shape[0]
        To, N, Ho, Wo = self.output_shape(x.shape[1:])
        cols = _im2col(x, self.size_t, self.size, self.stride_t, self.stride, (To, Ho, Wo))
        self._cache = (cols, x.shape)
        z = cols @ self.params["weights"].reshape(N, -1).T + self.params["biases"]
        return z.reshape(B, To, Ho, Wo, N).transpose(0, 1, 4, 2, 3)

    def _backward(self, grad):
        cols, in_shape = self._cache
        B, To, N, Ho, Wo = grad.shape
        gm = grad.transpose(0, 1, 3, 4, 2).reshape(-1, N)
        w = self.params["weights"]
        self.grads["weights"] += (gm.T @ cols).reshape(w.shape)
        self.grads["biases"] += gm.sum(axis=0)
        dcols = gm @ w.reshape(N, -1)
        return _col2im(dcols, in_shape[1:], self.size_t, self.size, self.stride_t,
                       self.stride, (To, Ho, Wo), B)

    def describe(self):
        return f"C({self.filters},{self.size},{self.stride})"


class Deconv3D(Layer):
    """Transposed convolution: the adjoint of :class:`Conv3D` with the same geometry.

    ``weights`` has the layout of the mirrored convolution, ``[in_channels,
    out_channels, ft, f, f]``. ``target`` is the (T, H, W) size to produce; it
    may exceed the plain shape law by less than one stride per axis, the
    extra trailing positions receiving only the bias.
    """

    kind = "deconv"

    def __init__(self, in_channels, out_channels, size, stride, size_t=1, stride_t=1,
                 target=None, relu=True):
        super().__init__(relu=relu)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.size, self.stride = size, stride
        self.size_t, self.stride_t = size_t, stride_t
        self.target = tuple(target) if target is not None else None

    def param_shapes(self):
        return {"weights": (self.in_channels, self.out_channels, self.size_t, self.size, self.size),
                "biases": (self.out_channels,)}

    def output_shape(self, input_shape):
        T, C, H, W = input_shape
        if C != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {C}")
        base = (deconv_out(T, self.size_t, self.stride_t),
                deconv_out(H, self.size, self.stride),
                deconv_out(W, self.size, self.stride))
        if self.target is None:
            dims = base
        else:
            strides = (self.stride_t, self.stride, self.stride)
            for got, want, st in zip(base, self.target, strides):
                if not 0 <= want - got < st:
                    raise ValueError(
                        f"{self.name}: cannot reach size {self.target} from input "
                        f"({T},{H},{W}); plain transposed size is {base}")
            dims = self.target
        return (dims[0], self.out_channels, dims[1], dims[2])

    def _forward(self, y):
        T, C, H, W = self.output_shape(y.shape[1:])
        self._cache = (y, (T, H, W))
        out = conv3d_transpose_linear(y, self.params["weights"], self.stride,
                                      self.stride_t, (T, H, W))
        return out + self.params["biases"].reshape(1, 1, -1, 1, 1)

    def _backward(self, grad):
        y, _ = self._cache
        B, Ti, Ci, Hi, Wi = y.shape
        w = self.params["weights"]
        gcols = _im2col(grad, self.size_t, self.size, self.stride_t, self.stride, (Ti, Hi, Wi))
        ym = y.transpose(0, 1, 3, 4, 2).reshape(-1, Ci)
        self.grads["weights"] += (ym.T @ gcols).reshape(w.shape)
        self.grads["biases"] += grad.sum(axis=(0, 1, 3, 4))
        dy = gcols @ w.reshape(Ci, -1).T
        return dy.reshape(B, Ti, Hi, Wi, Ci).transpose(0, 1, 4, 2, 3)

    def describe(self):
        return f"DC({self.in_channels},{self.size},{self.stride})"


class LRN(Layer):
    """Cross-channel local response normalization ``x / (k + alpha * sum x^2)^beta``."""

    kind = "lrn"

    def __init__(self, size=5, k=2.0, alpha=1e-4, beta=0.75):
        super().__init__(relu=False)
        self.size, self.k, self.alpha, self.beta = size, k, alpha, beta

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def _window_sum(self, v, axis):
        half = self.size // 2
        v = np.moveaxis(v, axis, -1)
        pad = [(0, 0)] * (v.ndim - 1) + [(half + 1, half)]
        c = np.cumsum(np.pad(v, pad), axis=-1)
        out = c[..., self.size:] - c[..., :-self.size]
        return np.moveaxis(out, -1, axis)

    def _forward(self, x):
        axis = 2 if x.ndim == 5 else 1
        scale = self.k + self.alpha * self._window_sum(x * x, axis)
        self._cache = (x, scale, axis)
        return x * scale ** -self.beta

    def _backward(self, grad):
        x, scale, axis = self._cache
        inner = grad * x * scale ** (-self.beta - 1.0)
        return (grad * scale ** -self.beta
                - 2.0 * self.alpha * self.beta * x * self._window_sum(inner, axis))

    def describe(self):
        return "N"


class FC(Layer):
    """Affine map on the flattened sample; weights are ``[out, in]``."""

    kind = "fc"

    def __init__(self, n_in, n_out, relu=True):
        super().__init__(relu=relu)
        self.n_in, self.n_out = n_in, n_out

    def param_shapes(self):
        return {"weights": (self.n_out, self.n_in), "biases": (self.n_out,)}

    def output_shape(self, input_shape):
        if math.prod(input_shape) != self.n_in:
            raise ValueError(
                f"{self.name}: expected {self.n_in} inputs, got {math.prod(input_shape)}")
        return (self.n_out,)

    def _forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.n_in:
            raise ValueError(f"{self.name}: expected {self.n_in} inputs, got {flat.shape[1]}")
        self._cache = (flat, x.shape)
        return flat @ self.params["weights"].T + self.params["biases"]

    def _backward(self, grad):
        flat, shape = self._cache
        self.grads["weights"] += grad.T @ flat
        self.grads["biases"] += grad.sum(axis=0)
        return (grad @ self.params["weights"]).reshape(shape)

    def describe(self):
        return f"FC({self.n_out})"


class Unflatten(FC):
    """Fully connected projection reshaped into a ``[T, C, H, W]`` volume.

    Bridges a flat bottleneck back to the spatio-temporal decoder.
    """

    kind = "unflatten"

    def __init__(self, n_in, shape, relu=True):
        super().__init__(n_in, math.prod(shape), relu=relu)
        self.shape = tuple(shape)

    def output_shape(self, input_shape):
        super().output_shape(input_shape)
        return self.shape

    def _forward(self, x):
        return super()._forward(x).reshape((x.shape[0],) + self.shape)

    def _backward(self, grad):
        return super()._backward(grad.reshape(grad.shape[0], -1))

    def describe(self):
        return "U"


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_loss(logits, labels):
    """Mean cross-entropy of softmax(logits); returns ``(loss, dloss/dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K})")
    B = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(B), labels]))
    grad = softmax(logits)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


def euclidean_loss(reconstruction, target, normalize="mean"):
    """Squared error, averaged per element (``"mean"``) or summed (``"sum"``)."""
    r = np.asarray(reconstruction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {t.shape}")
    diff = r - t
    scale = 1.0 / diff.size if normalize == "mean" else 1.0
    return float(scale * np.sum(diff * diff)), 2.0 * scale * diff


# checkpoints -----------------------------------------------------------

MANIFEST = "manifest.txt"


def save_params(layers, directory):
    """Write named layers' parameters as MVT1 files plus an ordered manifest."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name, layer in layers:
        for key in sorted(layer.params):
            fname = f"{name}.{key}.mvt"
            write_tensor(os.path.join(directory, fname), layer.params[key])
            lines.append(f"{name} {key} {fname}")
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory):
    entries = []
    with open(os.path.join(directory, MANIFEST)) as fh:
        for line in fh:
            if line.strip():
                name, key, fname = line.split()
                entries.append((name, key, fname))
    return entries


def load_params(layers, directory, strict=True):
    """Fill named layers from a checkpoint directory; returns names loaded."""
    by_name = dict(layers)
    loaded = []
    for name, key, fname in read_manifest(directory):
        if name not in by_name:
            if strict:
                raise KeyError(f"checkpoint layer {name!r} not in network")
            continue
        layer = by_name[name]
        value = read_tensor(os.path.join(directory, fname))
        expected = layer.param_shapes()[key]
        if value.shape != tuple(expected):
            raise ValueError(f"{name}.{key}: shape {value.shape}, expected {expected}")
        layer.params[key] = value
        loaded.append(name)
    for _, layer in layers:
        layer.zero_grad()
    return loaded
