import math

import numpy as np
import pytest

from mvnet import layers as L
from mvnet.spline import spline_weights
from gradcases import GRAD_CASES, N_INSTANCES, checked_instances
from oracles import layer_grad_errors, naive_conv3d, numeric_grad, oracle_spline, rel_error


def assert_grads(layer, x, rng, tol=1e-4):
    errors = layer_grad_errors(layer, x, rng)
    assert max(errors.values()) < tol, errors


# finite-difference checks -------------------------------------------------

@pytest.mark.parametrize("name", list(GRAD_CASES))
def test_layer_gradients(name):
    rng = np.random.default_rng(11)
    for layer, x in checked_instances(GRAD_CASES[name], rng):
        assert_grads(layer, x, rng)


def test_softmax_loss_gradient():
    rng = np.random.default_rng(12)
    for _ in range(N_INSTANCES):
        logits = rng.normal(scale=2.0, size=(4, 7))
        labels = rng.integers(0, 7, size=4)
        _, g = L.softmax_loss(logits, labels)
        num = numeric_grad(lambda: L.softmax_loss(logits, labels)[0], logits)
        assert rel_error(g, num) < 1e-5


@pytest.mark.parametrize("normalize", ["mean", "sum"])
def test_euclidean_loss_gradient(normalize):
    rng = np.random.default_rng(13)
    for _ in range(N_INSTANCES):
        r, t = rng.normal(size=(2, 3, 1, 2, 2)), rng.normal(size=(2, 3, 1, 2, 2))
        _, g = L.euclidean_loss(r, t, normalize)
        num = numeric_grad(lambda: L.euclidean_loss(r, t, normalize)[0], r)
        assert rel_error(g, num) < 1e-6


# convolution oracles -------------------------------------------------------

def test_conv_against_loops():
    rng = np.random.default_rng(14)
    layer = L.Conv3D(1, 2, size=3, stride=2, size_t=3, stride_t=2, relu=False)
    layer.init_params(rng, 1.0)
    layer.params["biases"] = rng.normal(size=2)
    x = rng.normal(size=(1, 9, 1, 7, 7))
    out = layer.forward(x)
    assert out.shape == (1, 4, 2, 3, 3)
    expected = naive_conv3d(x, layer.params["weights"], layer.params["biases"], 2, 2)
    assert np.max(np.abs(out - expected)) < 1e-12


def test_conv_relu_clamps():
    layer = L.Conv3D(1, 1, 1, 1)
    layer.init_params(np.random.default_rng(0))
    layer.params["weights"][...] = 1.0
    out = layer.forward(np.array([-1.0, 2.0]).reshape(1, 2, 1, 1, 1))
    np.testing.assert_array_equal(out.ravel(), [0.0, 2.0])


def test_conv_adjoint_identity():
    rng = np.random.default_rng(15)
    for _ in range(20):
        f, s = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        ft, st = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        c, n = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        dims = (ft + int(rng.integers(0, 5)), f + int(rng.integers(0, 6)),
                f + int(rng.integers(0, 6)))
        w = rng.normal(size=(n, c, ft, f, f))
        x = rng.normal(size=(2, dims[0], c, dims[1], dims[2]))
        cx = L.conv3d_linear(x, w, ft, s, st)
        y = rng.normal(size=cx.shape)
        back = L.conv3d_transpose_linear(y, w, s, st, dims)
        lhs, rhs = np.sum(cx * y), np.sum(x * back)
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_deconv_shape_law_and_target():
    layer = L.Deconv3D(4, 2, size=3, stride=2, size_t=2, stride_t=2, target=(4, 8, 8))
    assert layer.output_shape((2, 4, 3, 3)) == (4, 2, 8, 8)
    with pytest.raises(ValueError):
        L.Deconv3D(4, 2, 3, 2, target=(1, 9, 9)).output_shape((1, 4, 3, 3))


# normalization and losses ---------------------------------------------------

@pytest.mark.parametrize("v", [0.0, 1.0, -3.0, 50.0])
def test_lrn_single_channel(v):
    out = L.LRN().forward(np.full((1, 1, 1, 1, 1), v))
    assert abs(out.item() - v / (2 + 1e-4 * v * v) ** 0.75) < 1e-15


def test_softmax_uniform():
    loss, _ = L.softmax_loss(np.zeros((3, 7)), [0, 3, 6])
    assert abs(loss - math.log(7)) < 1e-12


def test_softmax_confident():
    loss, _ = L.softmax_loss([[10.0, -10.0]], [0])
    assert abs(loss - math.log1p(math.exp(-20))) < 1e-15
    assert abs(loss - 2.06e-9) < 1e-11


def test_softmax_extreme_logits_finite():
    loss, g = L.softmax_loss([[1000.0, -1000.0, 0.0]], [1])
    assert math.isfinite(loss) and np.all(np.isfinite(g))


def test_softmax_bad_label():
    with pytest.raises(ValueError):
        L.softmax_loss(np.zeros((1, 3)), [3])


def test_euclidean_values():
    assert L.euclidean_loss(np.ones((2, 2)), np.zeros((2, 2)), "mean")[0] == 1.0
    assert L.euclidean_loss(np.ones((2, 2)), np.zeros((2, 2)), "sum")[0] == 4.0
    with pytest.raises(ValueError):
        L.euclidean_loss(np.ones(3), np.ones(4))


# velocity layer --------------------------------------------------------------

def test_velocity_matches_spline_interpolation():
    rng = np.random.default_rng(16)
    knots, queries = np.arange(4.0), [0.5, 1.5, 2.5]
    layer = L.Velocity(4, 3, init_weights=spline_weights(knots, queries))
    layer.init_params()
    x = rng.normal(size=(2, 4, 1, 2, 2))
    out = layer.forward(x)
    assert out.shape == (2, 3, 1, 2, 2)
    for b in range(2):
        for i in range(2):
            for j in range(2):
                expected = oracle_spline(knots, x[b, :, 0, i, j], queries)
                assert np.max(np.abs(out[b, :, 0, i, j] - expected)) < 1e-10


def test_velocity_wrong_extent():
    layer = L.Velocity(4, 4)
    layer.init_params()
    with pytest.raises(ValueError):
        layer.forward(np.zeros((1, 5, 1, 2, 2)))


def test_backward_before_forward():
    layer = L.FC(3, 2)
    layer.init_params(np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        layer.backward(np.zeros((1, 2)))


def test_he_init_scale():
    layer = L.Conv3D(3, 64, 5, 1, 2, 1)
    layer.init_params(np.random.default_rng(0), "he")
    fan_in = 3 * 2 * 5 * 5
    assert abs(layer.params["weights"].std() - math.sqrt(2 / fan_in)) < 0.01
    assert not layer.params["biases"].any()


# checkpoints ------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(17)
    a, b = L.FC(4, 3), L.Conv3D(1, 2, 3, 1)
    a.init_params(rng, 0.1)
    b.init_params(rng, 0.1)
    L.save_params([("fc", a), ("conv", b)], tmp_path)
    a2, b2 = L.FC(4, 3), L.Conv3D(1, 2, 3, 1)
    a2.init_params(rng, 0.1)
    b2.init_params(rng, 0.1)
    L.load_params([("fc", a2), ("conv", b2)], tmp_path)
    for old, new in ((a, a2), (b, b2)):
        for k in old.params:
            assert old.params[k].tobytes() == new.params[k].tobytes()


def test_checkpoint_shape_mismatch(tmp_path):
    a = L.FC(4, 3)
    a.init_params(np.random.default_rng(0))
    L.save_params([("fc", a)], tmp_path)
    b = L.FC(5, 3)
    b.init_params(np.random.default_rng(0))
    with pytest.raises(ValueError):
        L.load_params([("fc", b)], tmp_path)
    with pytest.raises(KeyError):
        L.load_params([("other", b)], tmp_path)
