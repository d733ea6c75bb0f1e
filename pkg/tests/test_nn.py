import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bridgeta import tensor as T
from bridgeta.errors import ContractError, FormatError, ShapeError
from bridgeta.nn import (AdamState, ConvLayer, CosineSchedule, ParamRegistry, adam_step,
                         load_checkpoint, lr_at, param_count, save_checkpoint)
from bridgeta.tensor import Tensor, grad_check


def test_init_bounds_and_zero_bias():
    rng = np.random.default_rng(0)
    layer = ConvLayer.init(rng, 4, 8, 3, scheme="fan_in_uniform")
    s = math.sqrt(1.0 / 36)
    assert np.abs(layer.kernel.data).max() <= s
    assert np.all(layer.bias.data == 0)
    he = ConvLayer.init(np.random.default_rng(0), 4, 8, 3)
    # same draws, scaled by sqrt(6)
    np.testing.assert_allclose(he.kernel.data, layer.kernel.data * math.sqrt(6.0), rtol=1e-12)


def test_init_is_seeded():
    a = ConvLayer.init(np.random.default_rng(7), 2, 3, 3)
    b = ConvLayer.init(np.random.default_rng(7), 2, 3, 3)
    np.testing.assert_array_equal(a.kernel.data, b.kernel.data)


def test_unknown_scheme_and_activation():
    with pytest.raises(ShapeError):
        ConvLayer.init(np.random.default_rng(0), 1, 1, 3, scheme="xavier")
    with pytest.raises(ShapeError):
        ConvLayer(T.zeros((1, 1, 3, 3)), T.zeros(1), activation="tanh")


def test_layer_preserves_spatial_size():
    layer = ConvLayer.init(np.random.default_rng(0), 3, 5, 3)
    assert layer(T.zeros((2, 3, 7, 9))).shape == (2, 5, 7, 9)


def test_relu_layer_output_nonnegative():
    layer = ConvLayer.init(np.random.default_rng(1), 2, 4, 3)
    out = layer(Tensor(np.random.default_rng(2).normal(size=(1, 2, 6, 6))))
    assert out.data.min() >= 0


def test_layer_gradient_check():
    rng = np.random.default_rng(3)
    layer = ConvLayer.init(rng, 2, 3, 3, activation="none")
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    r = Tensor(rng.normal(size=(1, 3, 5, 5)))
    rep = grad_check(lambda _: T.sum(T.mul(layer(x), r)), [x, layer.kernel, layer.bias])
    assert rep.passed, rep


def test_mult_count():
    layer = ConvLayer.init(np.random.default_rng(0), 16, 4, 1)
    assert layer.mult_count(32, 32) == 4 * 16 * 32 * 32


def test_registry_freeze_and_count():
    reg = ParamRegistry()
    reg.register_layer("a", ConvLayer.init(np.random.default_rng(0), 1, 2, 3))
    reg.register_layer("b", ConvLayer.init(np.random.default_rng(1), 2, 2, 1), frozen=True)
    assert reg.names() == ["a.kernel", "a.bias", "b.kernel", "b.bias"]
    assert param_count(reg) == 18 + 2 + 4 + 2
    assert param_count(reg, frozen_included=False) == 20
    assert not reg["b.kernel"].requires_grad
    assert [n for n, _ in reg.trainable()] == ["a.kernel", "a.bias"]
    with pytest.raises(ShapeError):
        reg.register("a.bias", T.zeros(2))


def test_adam_first_step_moves_by_lr():
    # with bias correction the first step is lr * sign(g) (up to eps)
    reg = ParamRegistry()
    p = reg.register("p", Tensor([1.0, -1.0, 2.0]))
    p.grad = np.array([0.5, -3.0, 1e-3])
    adam_step(reg, AdamState(), 0.1)
    np.testing.assert_allclose(p.data, [0.9, -0.9, 1.9], atol=1e-6)
    np.testing.assert_array_equal(p.grad, 0.0)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(4)
    grads = rng.normal(size=(5, 3))
    reg = ParamRegistry()
    p = reg.register("p", Tensor(np.zeros(3)))
    st_ = AdamState()
    m = v = np.zeros(3)
    ref = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        adam_step(reg, st_, 1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_skips_frozen_and_requires_grads():
    reg = ParamRegistry()
    a = reg.register("a", Tensor([1.0]))
    b = reg.register("b", Tensor([1.0]), frozen=True)
    with pytest.raises(ContractError):
        adam_step(reg, AdamState(), 0.1)
    a.grad = np.array([1.0])
    adam_step(reg, AdamState(), 0.1)
    assert b.data[0] == 1.0


def test_cosine_endpoints():
    s = CosineSchedule(1e-4, 20)
    assert lr_at(s, 0) == 1e-4
    assert lr_at(s, 10) == pytest.approx(5e-5, rel=1e-12)
    assert lr_at(s, 20) == 0.0
    with pytest.raises(ShapeError):
        lr_at(s, 21)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 19.999), st.floats(0, 19.999))
def test_cosine_monotone(e1, e2):
    s = CosineSchedule(1e-3, 20, 1e-5)
    lo, hi = sorted((e1, e2))
    assert lr_at(s, lo) >= lr_at(s, hi)
    assert 1e-5 <= lr_at(s, hi) <= 1e-3


def _reg():
    reg = ParamRegistry()
    reg.register_layer("enc.0", ConvLayer.init(np.random.default_rng(0), 3, 4, 3))
    reg.register("head.kernel", Tensor(np.arange(6.0).reshape(2, 3)), frozen=True)
    return reg


def test_checkpoint_roundtrip(tmp_path):
    reg = _reg()
    save_checkpoint(reg, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.names() == reg.names()
    for name, t in reg.items():
        np.testing.assert_array_equal(back[name].data, t.data)
        assert back.is_frozen(name) == reg.is_frozen(name)
    assert all(load_checkpoint(tmp_path / "m.ckpt", frozen=True).is_frozen(n) for n in reg.names())


def test_checkpoint_bytes_are_deterministic(tmp_path):
    save_checkpoint(_reg(), tmp_path / "a")
    save_checkpoint(_reg(), tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
])
def test_checkpoint_corruption_names_field(tmp_path, mutate, match):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_reg(), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=match):
        load_checkpoint(path)
