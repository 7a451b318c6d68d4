import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ogpo.numeric import (Adam, NonFiniteError, OptimState, Tape, TapeError, ad, adam_update, finite_diff_grad,
                          grad_norm, init_mlp, lr_at, mlp_forward, rel_err)
from ogpo.rng import mix64, stream

UNARY = {
    "exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "square": ad.square, "gelu": ad.gelu,
    "log": lambda x: ad.log(x * x + 1.0), "sqrt": lambda x: ad.sqrt(x * x + 1.0),
    "power": lambda x: ad.power(x * x + 1.0, 1.5), "neg": ad.neg,
    "logsumexp": lambda x: ad.logsumexp(ad.reshape(x, (2, 3)), axis=-1),
}


def _grad(f, x):
    tape = Tape()
    p = tape.param("x", x)
    return tape.backward(ad.sum_(f(p)))["x"]


def _fd(f, x):
    return finite_diff_grad(lambda d: float(np.sum(ad.value(f(d["x"])))), {"x": x}, eps=1e-6)["x"]


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_unary_ops_match_finite_differences(name, x):
    x = np.array(x)
    f = UNARY[name]
    assert np.allclose(_grad(f, x), _fd(f, x), atol=1e-6, rtol=1e-5)


@given(a=st.lists(st.floats(-2, 2), min_size=6, max_size=6), b=st.lists(st.floats(0.5, 2), min_size=3, max_size=3))
def test_broadcast_binary_ops(a, b):
    a, b = np.array(a).reshape(2, 3), np.array(b)
    for f in (ad.add, ad.sub, ad.mul, ad.div):
        tape = Tape()
        pa, pb = tape.param("a", a), tape.param("b", b)
        g = tape.backward(ad.sum_(f(pa, pb) * np.arange(6.0).reshape(2, 3)))
        fd = finite_diff_grad(lambda d: float(np.sum(f(d["a"], d["b"]) * np.arange(6.0).reshape(2, 3))),
                              {"a": a, "b": b}, 1e-6)
        assert rel_err(g, fd) < 1e-6


def test_matmul_concat_getitem_gradients(rng):
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((2, 4, 5))

    def f(d):
        x = ad.concat([ad.matmul(d["A"], d["B"])[0], ad.reshape(d["A"], (3, 4))], axis=-1)
        return ad.sum_(ad.tanh(x) * 1.5)

    tape = Tape()
    g = tape.backward(f({"A": tape.param("A", A), "B": tape.param("B", B)}))
    fd = finite_diff_grad(lambda d: float(f(d)), {"A": A, "B": B}, 1e-6)
    assert rel_err(g, fd) < 1e-6


def test_minimum_ties_route_gradient_to_first_argument():
    tape = Tape()
    a, b = tape.param("a", np.array([1.0, 2.0])), tape.param("b", np.array([1.0, 3.0]))
    g = tape.backward(ad.sum_(ad.minimum(a, b)))
    assert np.array_equal(g["a"], [1.0, 1.0]) and np.array_equal(g["b"], [0.0, 0.0])


def test_clip_and_where_gradients():
    tape = Tape()
    x = tape.param("x", np.array([-2.0, 0.5, 2.0]))
    g = tape.backward(ad.sum_(ad.clip(x, -1.0, 1.0) * 3.0))
    assert np.array_equal(g["x"], [0.0, 3.0, 0.0])
    tape = Tape()
    x = tape.param("x", np.array([1.0, 2.0]))
    g = tape.backward(ad.sum_(ad.where(np.array([True, False]), x * 2.0, x * 5.0)))
    assert np.array_equal(g["x"], [2.0, 5.0])


def test_stop_gradient_blocks_flow():
    tape = Tape()
    x = tape.param("x", np.array([3.0]))
    g = tape.backward(ad.sum_(x * ad.stop_gradient(x)))
    assert np.allclose(g["x"], [3.0])


def test_tape_is_single_use():
    tape = Tape()
    x = tape.param("x", np.ones(2))
    y = ad.sum_(x * x)
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_plain_arrays_bypass_the_tape():
    out = ad.tanh(np.zeros(3)) + 1.0
    assert isinstance(out, np.ndarray) and np.array_equal(out, np.ones(3))


def test_mlp_shapes_and_ensemble_independence(rng):
    net = init_mlp("q", (5, 7, 1), rng, "relu", ensemble=3)
    x = rng.standard_normal((4, 5))
    out = mlp_forward(net, x)
    assert out.shape == (3, 4, 1)
    net.params["q.W0"][1] += 1.0
    out2 = mlp_forward(net, x)
    assert np.array_equal(out[0], out2[0]) and np.array_equal(out[2], out2[2])
    assert not np.array_equal(out[1], out2[1])


def test_mlp_rejects_bad_input(rng):
    net = init_mlp("p", (3, 4, 2), rng)
    with pytest.raises(ValueError):
        mlp_forward(net, np.zeros((2, 4)))
    with pytest.raises(NonFiniteError):
        mlp_forward(net, np.full((2, 3), np.nan))


def test_mlp_gradient_matches_fd(rng):
    net = init_mlp("p", (3, 6, 2), rng, "gelu")
    x = rng.standard_normal((5, 3))

    def loss(params, tape=None):
        return ad.sum_(ad.square(mlp_forward(net, x, tape, params=params)))

    tape = Tape()
    g = tape.backward(loss(tape.watch(net.params), tape))
    fd = finite_diff_grad(lambda p: float(loss(p)), net.params, 1e-6)
    assert rel_err(g, fd) < 1e-6


def test_adam_first_step_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.1])}
    new, st_ = adam_update(p, g, OptimState(), lr=0.1)
    # first bias-corrected step moves every coordinate by lr * sign(g)
    assert np.allclose(new["w"], [0.9, -1.9], atol=1e-6)
    assert st_.step == 1 and p["w"][0] == 1.0


def test_adam_weight_decay_is_decoupled():
    p = {"w": np.array([2.0])}
    new, _ = adam_update(p, {"w": np.zeros(1)}, OptimState(weight_decay=0.1), lr=0.5)
    assert np.allclose(new["w"], [2.0 - 0.5 * 0.1 * 2.0])


def test_adam_minimises_quadratic():
    p = {"w": np.array([3.0, -4.0])}
    opt = Adam(p, 0.1)
    for _ in range(500):
        opt.step({"w": 2 * p["w"]})
    assert np.linalg.norm(p["w"]) < 1e-2


def test_lr_schedules():
    s = OptimState(schedule="cosine", warmup_steps=10, decay_steps=100, end_value=0.1)
    assert lr_at(0, s, 1.0) == 0.0
    assert lr_at(5, s, 1.0) == pytest.approx(0.5)
    assert lr_at(10, s, 1.0) == pytest.approx(1.0)
    assert lr_at(60, s, 1.0) == pytest.approx(0.1 + 0.45 * (1 + math.cos(math.pi * 0.5)))
    assert lr_at(10_000, s, 1.0) == pytest.approx(0.1)
    assert lr_at(7, OptimState(), 0.3) == 0.3
    with pytest.raises(ValueError):
        OptimState(schedule="linear")


def test_grad_norm():
    assert grad_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == 5.0


def test_finite_diff_does_not_mutate(rng):
    p = {"x": rng.standard_normal(4)}
    before = p["x"].copy()
    finite_diff_grad(lambda d: float(np.sum(d["x"] ** 3)), p)
    assert np.array_equal(p["x"], before)


@given(seed=st.integers(0, 2**32), tag=st.text(max_size=8))
def test_streams_are_reproducible_and_tag_separated(seed, tag):
    assert stream(seed, tag).random() == stream(seed, tag).random()
    assert mix64(seed, tag) != mix64(seed, tag + "x")
