import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rebalance.nn import (
    ACTIVATIONS,
    MLP,
    Adam,
    Dense,
    GRUCell,
    ParamBlock,
    adam_step,
    clip_by_global_norm,
    soft_update,
)

from gradcheck import numeric_grad, rel_error


@pytest.mark.parametrize("activation", sorted(ACTIVATIONS))
@pytest.mark.parametrize("groups", [None, 3])
def test_dense_gradients(activation, groups):
    rng = np.random.default_rng(1)
    layer = Dense(4, 3, activation, rng, groups)
    shape = (5, 4) if groups is None else (5, groups, 4)
    x = rng.normal(size=shape)
    x[np.abs(x) < 1e-3] = 0.1  # keep relu away from its kink
    up = rng.normal(size=shape[:-1] + (3,))

    def loss():
        return float(np.sum(layer.forward(x)[0] * up))

    y, cache = layer.forward(x)
    dx, grads = layer.backward(up, cache)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-4
    for k, p in layer.params.items():
        assert rel_error(grads[k], numeric_grad(loss, p)) < 1e-4


@pytest.mark.parametrize("groups", [None, 2])
def test_gru_step_gradients(groups):
    rng = np.random.default_rng(2)
    cell = GRUCell(3, 4, rng, groups)
    lead = (6,) if groups is None else (6, groups)
    x = rng.normal(size=lead + (3,))
    h = rng.normal(size=lead + (4,))
    up = rng.normal(size=lead + (4,))

    def loss():
        return float(np.sum(cell.forward(x, h)[0] * up))

    _, cache = cell.forward(x, h)
    dx, dh, grads = cell.backward(up, cache)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-4
    assert rel_error(dh, numeric_grad(loss, h)) < 1e-4
    for k, p in cell.params.items():
        assert rel_error(grads[k], numeric_grad(loss, p)) < 1e-4


@pytest.mark.parametrize("groups", [None, 3])
def test_gru_sequence_gradients(groups):
    rng = np.random.default_rng(3)
    cell = GRUCell(2, 5, rng, groups)
    shape = (4, 6, 2) if groups is None else (4, groups, 6, 2)
    xs = rng.normal(size=shape)
    lead = shape[:-2]
    h0 = rng.normal(size=lead + (5,))
    up = rng.normal(size=lead + (5,))

    def loss():
        return float(np.sum(cell.sequence_forward(xs, h0)[0] * up))

    _, cache = cell.sequence_forward(xs, h0)
    dxs, dh0, grads = cell.sequence_backward(up, cache)
    assert rel_error(dxs, numeric_grad(loss, xs)) < 1e-4
    assert rel_error(dh0, numeric_grad(loss, h0)) < 1e-4
    for k, p in cell.params.items():
        assert rel_error(grads[k], numeric_grad(loss, p)) < 1e-4


def test_gru_sequence_matches_stepwise():
    rng = np.random.default_rng(4)
    cell = GRUCell(1, 8, rng, groups=4)
    xs = rng.normal(size=(3, 4, 5, 1))
    h = np.zeros((3, 4, 8))
    for k in range(5):
        h, _ = cell.forward(xs[:, :, k], h)
    seq, _ = cell.sequence_forward(xs)
    np.testing.assert_allclose(seq, h, rtol=1e-12, atol=1e-12)


def test_gru_gates_by_hand():
    # one unit, weights chosen so every gate is computable by hand
    cell = GRUCell(1, 1)
    cell.params["W"][...] = [[1.0, 2.0, 3.0]]
    cell.params["Uzr"][...] = [[0.5, -1.0]]
    cell.params["Uc"][...] = [[2.0]]
    cell.params["b"][...] = [0.1, 0.2, 0.3]
    x, h = 0.4, -0.6
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    z = sig(0.4 + 0.5 * h + 0.1)
    r = sig(0.8 - 1.0 * h + 0.2)
    c = np.tanh(1.2 + 2.0 * r * h + 0.3)
    expect = (1 - z) * h + z * c
    out, _ = cell.forward(np.array([[x]]), np.array([[h]]))
    assert out[0, 0] == pytest.approx(expect, rel=1e-12)


def test_gru_groups_are_independent():
    rng = np.random.default_rng(5)
    cell = GRUCell(1, 3, rng, groups=2)
    xs = rng.normal(size=(2, 2, 4, 1))
    base, _ = cell.sequence_forward(xs)
    xs2 = xs.copy()
    xs2[:, 1] += 1.0
    moved, _ = cell.sequence_forward(xs2)
    np.testing.assert_array_equal(base[:, 0], moved[:, 0])
    assert not np.allclose(base[:, 1], moved[:, 1])


def test_mlp_chain_gradient():
    rng = np.random.default_rng(6)
    net = MLP([5, 7, 6, 2], ["tanh", "relu", "sigmoid"], rng)
    x = rng.normal(size=(3, 5))
    up = rng.normal(size=(3, 2))

    def loss():
        return float(np.sum(net.forward(x)[0] * up))

    _, cache = net.forward(x)
    dx, grads = net.backward(up, cache)
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-4
    for k, p in net.params.items():
        assert rel_error(grads[k], numeric_grad(loss, p)) < 1e-4


def test_dense_rejects_bad_shape():
    layer = Dense(3, 2)
    with pytest.raises(ValueError):
        layer.forward(np.zeros((4, 5)))
    with pytest.raises(ValueError):
        Dense(3, 2, activation="softplus")


def test_adam_first_step_is_lr_sized():
    p = ParamBlock(w=np.array([1.0, -2.0]))
    opt = Adam(p, lr=0.01, clip_norm=None)
    opt.step({"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(p["w"], [1.0 - 0.01, -2.0 + 0.01], rtol=1e-6)


def test_adam_functional_wrapper_keeps_state():
    p = ParamBlock(w=np.zeros(1))
    state = adam_step(p, {"w": np.ones(1)}, None, lr=0.1)
    state = adam_step(p, {"w": np.ones(1)}, state, lr=0.1)
    assert state.t == 2
    assert p["w"][0] == pytest.approx(-0.2, rel=1e-6)


def test_adam_rejects_mismatched_gradients():
    opt = Adam(ParamBlock(w=np.zeros(2)))
    with pytest.raises(ValueError):
        opt.step({"v": np.zeros(2)})
    with pytest.raises(ValueError):
        opt.step({"w": np.zeros(3)})


@given(st.floats(0.0, 1.0))
@settings(max_examples=30, deadline=None)
def test_soft_update_is_convex_combination(tau):
    t = ParamBlock(w=np.array([0.0, 4.0]))
    o = {"w": np.array([2.0, 0.0])}
    soft_update(t, o, tau)
    np.testing.assert_allclose(t["w"], [2.0 * tau, 4.0 * (1 - tau)], atol=1e-12)


def test_soft_update_extremes_and_validation():
    t = ParamBlock(w=np.array([1.0]))
    soft_update(t, {"w": np.array([5.0])}, 1.0)
    assert t["w"][0] == 5.0
    with pytest.raises(ValueError):
        soft_update(t, {"w": np.array([5.0])}, 1.5)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert clipped["a"][0] == pytest.approx(0.6)
    same, _ = clip_by_global_norm(g, 10.0)
    assert same["b"][0] == 4.0


def test_checkpoint_round_trip():
    rng = np.random.default_rng(8)
    block = ParamBlock(a=rng.normal(size=(2, 3)), b=rng.normal(size=(4,)), c=np.array(1.5))
    buf = io.BytesIO()
    block.save(buf)
    raw = buf.getvalue()
    assert raw[:4] == b"RBNN"
    buf.seek(0)
    loaded = ParamBlock.load(buf)
    assert list(loaded) == ["a", "b", "c"]
    for k in block:
        np.testing.assert_array_equal(loaded[k], block[k])


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        ParamBlock.load(io.BytesIO(b"NOPE" + b"\0" * 16))
