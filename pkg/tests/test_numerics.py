import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from csasr.errors import ConfigError, ContractError, FormatError, ShapeError
from csasr.numerics import (
    Tensor,
    activation,
    batch_norm,
    conv1d_depthwise,
    conv2d,
    dropout,
    functional as F,
    gradcheck,
    layer_norm,
    load_checkpoint,
    log_softmax,
    save_checkpoint,
    softmax,
)
from csasr.numerics.module import Module, Parameter

GRAD_TOL = 1e-4


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([1.0, 1.0]), 0).data, [0.5, 0.5])
    np.testing.assert_allclose(
        softmax(Tensor([0.0, math.log(3)]), 0).data, [0.25, 0.75], atol=1e-15
    )
    out = softmax(Tensor([1000.0, 1000.0]), 0).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((2, 3))), axis=2)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 5), elements=st.floats(-700, 700)),
    st.sampled_from([0, 1, -1]),
)
def test_softmax_sums_to_one(x, axis):
    y = softmax(Tensor(x), axis).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-6)


def test_layer_norm_examples():
    one, zero = np.ones(3), np.zeros(3)
    np.testing.assert_allclose(layer_norm(Tensor([2.0, 2, 2]), one, zero).data, 0.0)
    np.testing.assert_allclose(
        layer_norm(Tensor([0.0, 2.0]), np.ones(2), np.zeros(2), eps=0.0).data, [-1, 1]
    )
    np.testing.assert_allclose(
        layer_norm(Tensor([0.0, 2.0]), [3.0, 3.0], [1.0, 1.0], eps=0.0).data, [-2, 4]
    )
    with pytest.raises(ShapeError):
        layer_norm(Tensor([0.0, 2.0]), np.ones(3), np.zeros(3))


def test_layer_norm_moments():
    x = np.random.default_rng(1).normal(3, 7, size=(6, 16))
    y = layer_norm(Tensor(x), np.ones(16), np.zeros(16)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-5)


def test_conv1d_depthwise_examples():
    x = np.random.default_rng(0).normal(size=(7, 3))
    ident = np.zeros((3, 5))
    ident[:, 2] = 1
    np.testing.assert_array_equal(conv1d_depthwise(Tensor(x), ident).data, x)
    y = conv1d_depthwise(Tensor([[1.0], [2.0], [3.0]]), [[1.0, 1.0, 1.0]]).data
    np.testing.assert_allclose(y[:, 0], [3, 6, 5])
    kernel = np.array([[1.0, 2.0, 3.0, 4.0, 5.0]])
    impulse = np.zeros((9, 1))
    impulse[4] = 1
    y = conv1d_depthwise(Tensor(impulse), kernel).data[:, 0]
    np.testing.assert_allclose(y[2:7], kernel[0, ::-1])
    np.testing.assert_allclose(y[[0, 1, 7, 8]], 0)


def test_conv1d_depthwise_even_kernel_rejected():
    with pytest.raises(ConfigError):
        conv1d_depthwise(Tensor(np.zeros((4, 2))), np.zeros((2, 4)))


def test_conv1d_depthwise_channel_isolation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 8, 4))
    k = rng.normal(size=(4, 3))
    base = conv1d_depthwise(Tensor(x), k).data
    for j in range(4):
        x2 = x.copy()
        x2[..., j] += rng.normal(size=(2, 8))
        diff = np.abs(conv1d_depthwise(Tensor(x2), k).data - base).max(axis=(0, 1))
        assert diff[j] > 0
        assert np.all(np.delete(diff, j) == 0)


def test_activation_examples():
    np.testing.assert_allclose(activation(Tensor([2.0, 0.0]), "glu").data, [1.0])
    assert activation(Tensor([0.0]), "swish").data[0] == 0.0
    np.testing.assert_allclose(
        activation(Tensor([1.0]), "swish").data, [1 / (1 + math.exp(-1))]
    )
    with pytest.raises(ShapeError):
        activation(Tensor([1.0, 2.0, 3.0]), "glu")
    x = np.linspace(-5, 5, 21)
    for kind in ("sigmoid", "relu"):
        assert np.all(np.diff(activation(Tensor(x), kind).data) >= 0)


def test_dropout_identity_cases():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 5)))
    assert dropout(x, 0.0, rng).data is x.data
    np.testing.assert_array_equal(dropout(x, 0.7, rng, training=False).data, x.data)
    y = dropout(x, 0.5, rng).data
    assert np.all((y == 0) | np.isclose(y, 2 * x.data))


def test_backward_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))
    s = Tensor(3.0, requires_grad=True)
    (s**2).backward()
    assert s.grad == 6.0
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_frozen_parameters_get_no_gradient():
    class Tiny(Module):
        def __init__(self):
            self.a = Parameter(np.ones(3))
            self.b = Parameter(np.ones(3))

    m = Tiny()
    groups = {g.name: g for g in m.param_groups()}
    groups["b"].trainable = False
    ((m.a * m.b).sum() * 2).backward()
    assert m.a.grad is not None and m.b.grad is None
    np.testing.assert_array_equal(m.b.data, 1.0)


def test_shared_subgraph_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(-4.0, requires_grad=True)
    q = (x + y) * (x + 1)
    q.backward()
    assert x.grad == pytest.approx(1.0)
    assert y.grad == pytest.approx(3.0)


RNG = np.random.default_rng(42)


PRIMITIVE_CASES = [
    ("softmax", lambda x: softmax(x, -1), [RNG.normal(size=(3, 4))]),
    ("log_softmax", lambda x: log_softmax(x, 0), [RNG.normal(size=(3, 4))]),
    ("layer_norm", layer_norm, [RNG.normal(size=(3, 5)), RNG.normal(size=5), RNG.normal(size=5)]),
    ("conv1d_depthwise", conv1d_depthwise, [RNG.normal(size=(2, 6, 3)), RNG.normal(size=(3, 3))]),
    (
        "conv2d",
        lambda x, w, b: conv2d(x, w, b, stride=2, padding=1),
        [RNG.normal(size=(2, 2, 7, 6)), RNG.normal(size=(3, 2, 4, 4)), RNG.normal(size=3)],
    ),
    ("glu", F.glu, [RNG.normal(size=(3, 6))]),
    ("swish", F.swish, [RNG.normal(size=(3, 4))]),
    ("sigmoid", F.sigmoid, [RNG.normal(size=(3, 4))]),
    ("relu", F.relu, [RNG.normal(size=(3, 4))]),
    ("linear", F.linear, [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(4, 5)), RNG.normal(size=5)]),
    ("matmul", lambda a, b: a @ b, [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(4, 2))]),
    ("div_exp_log", lambda a, b: (a / b.exp()).exp() + (b * b + 1).log(), [RNG.normal(size=(3,)), RNG.normal(size=(2, 3))]),
    ("mean_transpose", lambda a: a.transpose(1, 0, 2).mean(axis=1) ** 3, [RNG.normal(size=(2, 3, 4))]),
    ("getitem", lambda a: a[:, 1:3] * a[:, [0, 0]], [RNG.normal(size=(3, 4))]),
    (
        "batch_norm_train",
        lambda x, g, b: batch_norm(
            x, g, b, np.zeros(3), np.ones(3), training=True,
            mask=np.array([[1, 1, 1, 0], [1, 1, 0, 0]], bool),
        ),
        [RNG.normal(size=(2, 4, 3)), RNG.normal(size=3), RNG.normal(size=3)],
    ),
    (
        "batch_norm_eval",
        lambda x, g, b: batch_norm(x, g, b, np.full(3, 0.2), np.full(3, 1.5), training=False),
        [RNG.normal(size=(2, 4, 3)), RNG.normal(size=3), RNG.normal(size=3)],
    ),
]


@pytest.mark.parametrize("name,fn,inputs", PRIMITIVE_CASES)
def test_primitive_gradients(name, fn, inputs):
    errors = gradcheck(fn, inputs)
    assert max(errors) < GRAD_TOL, (name, errors)


def test_batch_norm_modes():
    rng = np.random.default_rng(5)
    x = rng.normal(2.0, 3.0, size=(4, 10, 3))
    rm, rv = np.zeros(3), np.ones(3)
    y = batch_norm(Tensor(x), np.ones(3), np.zeros(3), rm, rv, training=True).data
    np.testing.assert_allclose(y.reshape(-1, 3).mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(y.reshape(-1, 3).var(axis=0), 1, atol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.reshape(-1, 3).mean(axis=0))
    y2 = batch_norm(Tensor(x), np.ones(3), np.zeros(3), rm, rv, training=False).data
    np.testing.assert_allclose(y2, (x - rm) / np.sqrt(rv + 1e-5))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    tensors = {
        "encoder.block0.mhsa.w_q": rng.normal(size=(4, 4)),
        "encoder.norm.gamma": rng.normal(size=4).astype(np.float32),
        "scalar": np.array(3.25),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors, step=123, meta={"d_model": 4})
    loaded, step, meta = load_checkpoint(path)
    assert step == 123 and meta == {"d_model": 4}
    for k, v in tensors.items():
        assert loaded[k].dtype == v.dtype
        assert loaded[k].tobytes() == v.tobytes()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, {"w": np.ones(10)})
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"nonsense" + data[8:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
