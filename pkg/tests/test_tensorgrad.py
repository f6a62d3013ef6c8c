"""
Tests for the reverse-mode autodiff core
"""

import itertools
import warnings

import numpy as np
import pytest

import tensorgrad as tg


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "tanh", "exp", "softplus", "square"])
def test_elementwise_gradients_match_finite_differences(op, rng):
    a = tg.parameter(rng.normal(size=(3, 4)))
    b = tg.parameter(rng.normal(size=(3, 4)))
    if op in ("add", "sub", "mul"):
        err = tg.grad_check(lambda x, y: tg.sum(tg.elementwise(op, x, y)), [a, b])
    else:
        err = tg.grad_check(lambda x: tg.sum(tg.elementwise(op, x)), [a])
    assert err < 1e-5


def test_log_gradient(rng):
    x = tg.parameter(rng.uniform(0.5, 2.0, size=(5,)))
    assert tg.grad_check(lambda t: tg.sum(tg.log(t)), [x]) < 1e-5


def test_linear_and_layer_norm_gradients(rng):
    x = tg.parameter(rng.normal(size=(2, 3, 5)))
    w = tg.parameter(rng.normal(size=(5, 4)))
    b = tg.parameter(rng.normal(size=(4,)))
    g = tg.parameter(rng.uniform(0.5, 1.5, size=(4,)))
    beta = tg.parameter(rng.normal(size=(4,)))
    weights = tg.constant(rng.normal(size=(2, 3, 4)))

    def f(x_, w_, b_, g_, beta_):
        h = tg.layer_norm(tg.linear(x_, w_, b_), g_, beta_)
        return tg.sum(tg.mul(h, weights))

    assert tg.grad_check(f, [x, w, b, g, beta]) < 1e-4


def test_softmax_temperature_gradient_reaches_tau(rng):
    x = tg.parameter(rng.normal(size=(2, 6)))
    tau = tg.parameter([0.7])
    weights = tg.constant(rng.normal(size=(2, 6)))

    def f(x_, tau_):
        return tg.sum(tg.mul(tg.softmax_with_temperature(x_, tau_, 0.015), weights))

    with tg.Tape() as tape:
        out = f(x, tau)
    tape.backward(out)
    assert np.abs(tape.gradient(tau)).sum() > 0.0
    assert tg.grad_check(f, [x, tau]) < 1e-4


def test_softmax_rows_sum_to_one(rng):
    s = tg.softmax_with_temperature(tg.constant(rng.normal(size=(4, 7)) * 50), tg.constant([0.0]), 0.015)
    np.testing.assert_allclose(s.values.sum(axis=-1), np.ones(4), atol=1e-12)


def test_gaussian_logprob_matches_closed_form(rng):
    mean = rng.normal(size=(3, 2))
    std = rng.uniform(0.2, 1.5, size=(3, 2))
    sample = rng.normal(size=(3, 2))
    out = tg.gaussian_logprob(tg.constant(mean), tg.constant(std), tg.constant(sample))
    expected = (-0.5 * ((sample - mean) / std) ** 2 - np.log(std) - 0.5 * np.log(2 * np.pi)).sum(axis=-1)
    np.testing.assert_allclose(out.values, expected, rtol=1e-12)


def test_gaussian_logprob_gradient(rng):
    mean = tg.parameter(rng.normal(size=(3, 2)))
    std = tg.parameter(rng.uniform(0.5, 1.5, size=(3, 2)))
    sample = tg.constant(rng.normal(size=(3, 2)))
    err = tg.grad_check(lambda m, s: tg.sum(tg.gaussian_logprob(m, s, sample)), [mean, std])
    assert err < 1e-5


def test_take_accumulates_repeated_indices():
    x = tg.parameter([1.0, 2.0, 3.0])
    with tg.Tape() as tape:
        out = tg.sum(tg.take(x, [0, 0, 2]))
    tape.backward(out)
    np.testing.assert_array_equal(tape.gradient(x), [2.0, 0.0, 1.0])


def test_clip_blocks_gradient_outside_range():
    x = tg.parameter([-2.0, 0.5, 3.0])
    with tg.Tape() as tape:
        out = tg.sum(tg.clip(x, -1.0, 1.0))
    tape.backward(out)
    np.testing.assert_array_equal(tape.gradient(x), [0.0, 1.0, 0.0])


def test_scalar_sum_backward_raises_no_warnings():
    x = tg.parameter(np.ones((2, 3)))
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        with tg.Tape() as tape:
            out = tg.sum(tg.sum(x))
        tape.backward(out)
    np.testing.assert_array_equal(tape.gradient(x), np.ones((2, 3)))


def test_reduce_sum_over_set_is_bit_identical_under_permutation(rng):
    x = rng.normal(size=(3, 11, 5)) * 1e3
    base = tg.reduce_sum_over_set(tg.constant(x)).values
    for _ in range(5):
        perm = rng.permutation(11)
        shuffled = tg.reduce_sum_over_set(tg.constant(x[:, perm, :])).values
        assert np.array_equal(base, shuffled)
    np.testing.assert_allclose(base, x.sum(axis=1), rtol=1e-10)


def test_tensor_values_are_read_only():
    t = tg.constant([1.0, 2.0])
    with pytest.raises(ValueError):
        t.values[0] = 5.0


@pytest.mark.parametrize("build", [
    lambda: tg.matmul(tg.constant(np.ones((2, 3))), tg.constant(np.ones((4, 2)))),
    lambda: tg.add(tg.constant(np.ones((2, 3))), tg.constant(np.ones((3, 2)))),
    lambda: tg.linear(tg.constant(np.ones((2, 3))), tg.constant(np.ones((3, 2))), tg.constant(np.ones(3))),
    lambda: tg.concat([tg.constant(np.ones((2, 3))), tg.constant(np.ones((3, 3)))], axis=-1),
])
def test_shape_mismatch_raises(build):
    with pytest.raises(tg.TensorShapeError):
        build()


def test_value_preconditions_raise():
    with pytest.raises(tg.TensorValueError):
        tg.log(tg.constant([1.0, 0.0]))
    with pytest.raises(tg.TensorValueError):
        tg.softmax_with_temperature(tg.constant([1.0, 2.0]), tg.constant([-1.0]), 0.015)
    with pytest.raises(tg.TensorValueError):
        tg.gaussian_logprob(tg.constant([0.0]), tg.constant([0.0]), tg.constant([0.0]))


def test_grad_check_rejects_bad_step():
    x = tg.parameter([1.0])
    with pytest.raises(ValueError):
        tg.grad_check(lambda t: tg.sum(t), [x], h=1.0)


def test_operations_outside_tape_record_nothing():
    x = tg.parameter([1.0, 2.0])
    y = tg.sum(tg.square(x))
    assert y.requires_grad
    assert tg.current_tape() is None


def test_matmul_values():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tg.matmul(tg.constant(np.eye(2)), tg.constant(m)).values, m)
    np.testing.assert_array_equal(tg.matmul(tg.constant(m), tg.constant(m)).values, [[7.0, 10.0], [15.0, 22.0]])
    batched = tg.matmul(tg.constant(np.stack([m, np.eye(2)])), tg.constant(m)).values
    np.testing.assert_array_equal(batched, [m @ m, m])


def test_matmul_gradient(rng):
    a = tg.parameter(rng.normal(size=(3, 4)))
    b = tg.parameter(rng.normal(size=(4, 2)))
    weights = tg.constant(rng.normal(size=(3, 2)))
    assert tg.grad_check(lambda x, y: tg.sum(tg.mul(tg.matmul(x, y), weights)), [a, b]) < 1e-5


def test_shared_subexpressions_accumulate():
    x = tg.parameter([1.5, -2.0])
    with tg.Tape() as tape:
        out = tg.sum(tg.add(x, x))
    tape.backward(out)
    np.testing.assert_array_equal(tape.gradient(x), [2.0, 2.0])

    with tg.Tape() as tape:
        y = tg.tanh(x)
        out = tg.sum(tg.mul(y, y))
    tape.backward(out)
    expected = 2.0 * np.tanh(x.values) * (1.0 - np.tanh(x.values) ** 2)
    np.testing.assert_allclose(tape.gradient(x), expected, rtol=1e-12)


def test_layer_norm_of_constant_vector_is_the_bias():
    gain = tg.parameter([2.0, 3.0, 4.0])
    bias = tg.parameter([0.1, -0.2, 0.3])
    x = tg.parameter([5.0, 5.0, 5.0])
    with tg.Tape() as tape:
        out = tg.layer_norm(x, gain, bias)
        loss = tg.sum(out)
    np.testing.assert_array_equal(out.values, bias.values)
    tape.backward(loss)
    assert np.all(np.isfinite(tape.gradient(x)))
    np.testing.assert_array_equal(tape.gradient(gain), 0.0)


def test_layer_norm_of_two_opposite_values():
    out = tg.layer_norm(tg.constant([1.0, -1.0]), tg.constant([1.0, 1.0]), tg.constant([0.0, 0.0]))
    expected = 1.0 / np.sqrt(1.0 + tg.LAYER_NORM_EPS)
    np.testing.assert_allclose(out.values, [expected, -expected], rtol=1e-15)


def test_set_sum_is_identical_for_every_ordering(rng):
    x = rng.normal(size=(6, 3)) * np.array([1.0, 1e6, 1e-6])
    base = tg.reduce_sum_over_set(tg.constant(x), axis=0).values
    for perm in itertools.permutations(range(6)):
        assert np.array_equal(tg.reduce_sum_over_set(tg.constant(x[list(perm)]), axis=0).values, base)


def _case_unary(op, low=-2.0, high=2.0):
    def build(rng):
        x = tg.parameter(rng.uniform(low, high, size=(2, 3)))
        w = tg.constant(rng.normal(size=(2, 3)))
        return (lambda t: tg.sum(tg.mul(tg.elementwise(op, t), w))), [x]
    return build


def _case_binary(op):
    def build(rng):
        a, b = tg.parameter(rng.normal(size=(2, 3))), tg.parameter(rng.normal(size=(2, 3)))
        w = tg.constant(rng.normal(size=(2, 3)))
        return (lambda x, y: tg.sum(tg.mul(tg.elementwise(op, x, y), w))), [a, b]
    return build


def _case_linear(rng):
    x, wt, b = (tg.parameter(rng.normal(size=s)) for s in ((2, 3), (3, 4), (4,)))
    w = tg.constant(rng.normal(size=(2, 4)))
    return (lambda x_, wt_, b_: tg.sum(tg.mul(tg.linear(x_, wt_, b_), w))), [x, wt, b]


def _case_layer_norm(rng):
    x = tg.parameter(rng.normal(size=(2, 4)))
    gain, bias = tg.parameter(rng.uniform(0.5, 1.5, size=(4,))), tg.parameter(rng.normal(size=(4,)))
    w = tg.constant(rng.normal(size=(2, 4)))
    return (lambda x_, g_, b_: tg.sum(tg.mul(tg.layer_norm(x_, g_, b_), w))), [x, gain, bias]


def _case_softmax(rng):
    x, tau = tg.parameter(rng.normal(size=(2, 5))), tg.parameter([rng.uniform(0.3, 2.0)])
    w = tg.constant(rng.normal(size=(2, 5)))
    return (lambda x_, t_: tg.sum(tg.mul(tg.softmax_with_temperature(x_, t_, 0.015), w))), [x, tau]


def _case_set_sum(rng):
    x = tg.parameter(rng.normal(size=(2, 5, 3)))
    w = tg.constant(rng.normal(size=(2, 3)))
    return (lambda x_: tg.sum(tg.mul(tg.reduce_sum_over_set(x_), w))), [x]


def _case_logprob(rng):
    mean, std = tg.parameter(rng.normal(size=(2, 3))), tg.parameter(rng.uniform(0.3, 1.5, size=(2, 3)))
    sample = tg.constant(rng.normal(size=(2, 3)))
    return (lambda m, s: tg.sum(tg.gaussian_logprob(m, s, sample))), [mean, std]


def _case_shape_ops(rng):
    x = tg.parameter(rng.normal(size=(2, 3)))
    w = tg.constant(rng.normal(size=(5, 3)))

    def f(x_):
        joined = tg.concat([x_, tg.take(x_, [2, 0], axis=1)], axis=-1)
        stacked = tg.expand(tg.mean(joined, axis=0), 0, 3)
        return tg.sum(tg.mul(tg.reshape(stacked, (5, 3)), w))
    return f, [x]


@pytest.mark.parametrize("build", [
    _case_unary("tanh"), _case_unary("exp"), _case_unary("softplus"), _case_unary("square"),
    _case_unary("log", 0.3, 3.0), _case_binary("add"), _case_binary("sub"), _case_binary("mul"),
    _case_linear, _case_layer_norm, _case_softmax, _case_set_sum, _case_logprob, _case_shape_ops,
], ids=["tanh", "exp", "softplus", "square", "log", "add", "sub", "mul", "linear", "layer_norm",
        "softmax", "set_sum", "logprob", "shape_ops"])
def test_gradients_over_random_trials(build):
    rng = np.random.default_rng(11)
    for _ in range(100):
        f, inputs = build(rng)
        assert tg.grad_check(f, inputs, rng=rng) < 1e-4
