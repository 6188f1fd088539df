import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from attnpool import numerics as nx
from attnpool.errors import ContractError, DimensionError, NumericalError


def test_matmul_identity(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(nx.matmul(np.eye(3), x), x)


def test_matmul_hand_example():
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[1.0], [1.0]]
    assert oracles.matmul(a, b) == [[3.0], [7.0]]
    np.testing.assert_array_equal(nx.matmul(np.array(a), np.array(b)), [[3.0], [7.0]])


def test_matmul_zero(rng):
    np.testing.assert_array_equal(nx.matmul(np.zeros((2, 3)), rng.standard_normal((3, 5))), np.zeros((2, 5)))


def test_matmul_matches_scalar_loops(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
    np.testing.assert_allclose(nx.matmul(a, b), oracles.matmul(a.tolist(), b.tolist()), rtol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


@pytest.mark.parametrize(
    "x, expected",
    [
        ([0.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]),
        ([0.0, math.log(3.0)], [0.25, 0.75]),
        ([1000.0, 1000.0], [0.5, 0.5]),
    ],
)
def test_softmax_examples(x, expected):
    np.testing.assert_allclose(nx.stable_softmax(np.array(x)), expected, rtol=0, atol=1e-15)


def test_softmax_empty_axes():
    with pytest.raises(ContractError):
        nx.stable_softmax(np.zeros(3), axes=())


def test_tanh_examples():
    assert nx.tanh_map(np.array(0.0)) == 0.0
    big = float(nx.tanh_map(np.array(30.0)))
    assert 1 - 1e-9 < big <= 1.0
    assert abs(float(nx.tanh_map(np.array(0.5))) - oracles.tanh_series(0.5)) < 1e-12


def test_non_finite_is_an_error():
    with pytest.raises(NumericalError):
        nx.guarded_log(np.array([np.inf]))
    with pytest.raises(NumericalError):
        nx.add(np.array([1.0]), np.array([np.nan]))


def test_backward_sum_gives_ones(rng):
    tape = nx.Tape()
    w = tape.param("w", rng.standard_normal((3, 2)))
    grads = nx.backward(tape, nx.sum_all(w))
    np.testing.assert_array_equal(grads["w"], np.ones((3, 2)))


def test_backward_half_square_gives_w(rng):
    tape = nx.Tape()
    w0 = rng.standard_normal((4,))
    w = tape.param("w", w0)
    grads = nx.backward(tape, nx.scale(nx.sum_all(nx.mul(w, w)), 0.5))
    np.testing.assert_allclose(grads["w"], w0, rtol=1e-15)


def test_untouched_parameter_gets_zero(rng):
    tape = nx.Tape()
    w = tape.param("w", rng.standard_normal(3))
    tape.param("unused", rng.standard_normal((2, 2)))
    grads = nx.backward(tape, nx.sum_all(w))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_backward_rejects_non_scalar(rng):
    tape = nx.Tape()
    w = tape.param("w", rng.standard_normal(3))
    with pytest.raises(ContractError):
        nx.backward(tape, nx.tanh_map(w))


def test_backward_visits_in_reverse_order(rng):
    tape = nx.Tape()
    w = tape.param("w", rng.standard_normal((2, 2)))
    loss = nx.sum_all(nx.tanh_map(nx.matmul(w, w)))
    assert [n.op for n in tape.nodes] == ["matmul", "tanh", "sum"]
    order = []
    for node in tape.nodes:
        vjp = node.vjp

        def spy(g, vjp=vjp, op=node.op):
            order.append(op)
            return vjp(g)

        node.vjp = spy
    nx.backward(tape, loss)
    assert order == ["sum", "tanh", "matmul"]


def test_accumulation_is_linear(rng):
    w0 = rng.standard_normal((3, 3))

    def grad_of(build):
        tape = nx.Tape()
        w = tape.param("w", w0)
        return nx.backward(tape, build(w))["w"]

    path1 = lambda w: nx.sum_all(nx.tanh_map(w))
    path2 = lambda w: nx.sum_all(nx.mul(nx.matmul(w, w), w))
    both = grad_of(lambda w: nx.add(path1(w), path2(w)))
    np.testing.assert_allclose(both, grad_of(path1) + grad_of(path2), rtol=1e-13, atol=1e-14)


def test_grad_check_quadratic(rng):
    A = rng.standard_normal((4, 4))
    A = A @ A.T

    def fn(p):
        x = p["x"]
        return 0.5 * x @ A @ x, {"x": A @ x}

    report = nx.grad_check(fn, {"x": rng.standard_normal(4)}, step=1e-5, tolerance=1e-8)
    assert report.passed, report.max_rel_error
    assert report.worst < 1e-8


def test_grad_check_flags_corrupted_gradient(rng):
    def fn(p):
        x = p["x"]
        return float(np.sum(x**2)), {"x": 2 * x * 1.01}

    assert not nx.grad_check(fn, {"x": rng.standard_normal(5)}).passed


def test_grad_check_random_projections(rng):
    def fn(p):
        x = p["x"]
        return float(np.sum(np.sin(x))), {"x": np.cos(x)}

    report = nx.grad_check(fn, {"x": rng.standard_normal(50)}, projection_threshold=10, n_projections=32)
    assert report.passed

    def bad(p):
        x = p["x"]
        return float(np.sum(np.sin(x))), {"x": 1.01 * np.cos(x)}

    assert not nx.grad_check(bad, {"x": rng.standard_normal(50)}, projection_threshold=10).passed


def test_grad_check_reports_non_finite_loss():
    def fn(p):
        x = p["x"]
        return (math.inf if x[0] > 0.5 else float(x[0])), {"x": np.ones(1)}

    report = nx.grad_check(fn, {"x": np.array([0.5])})
    assert not report.passed
    assert report.failures and "x[0]" in report.failures[0]


# ---------------------------------------------------------------- property tests

dims = st.integers(1, 8)


def _check(build, params, tol=1e-4):
    report = nx.grad_check(nx.value_and_grad(build), params, step=1e-5, tolerance=tol)
    assert report.passed, report.max_rel_error


@settings(max_examples=25, deadline=None)
@given(m=dims, k=dims, n=dims, seed=st.integers(0, 2**31))
def test_matmul_gradients(m, k, n, seed):
    r = np.random.default_rng(seed)
    w = r.standard_normal((m, n))
    _check(lambda t, p: nx.sum_all(nx.mul(nx.matmul(p["a"], p["b"]), w)),
           {"a": r.standard_normal((m, k)), "b": r.standard_normal((k, n))})


@settings(max_examples=25, deadline=None)
@given(m=dims, n=dims, seed=st.integers(0, 2**31), axis=st.sampled_from([(-1,), (0,), (0, 1)]))
def test_softmax_tanh_gradients(m, n, seed, axis):
    r = np.random.default_rng(seed)
    w = r.standard_normal((m, n))
    _check(lambda t, p: nx.sum_all(nx.mul(nx.stable_softmax(nx.tanh_map(p["x"]), axis), w)),
           {"x": r.standard_normal((m, n))})


@settings(max_examples=25, deadline=None)
@given(m=dims, n=dims, seed=st.integers(0, 2**31))
def test_reduction_gradients(m, n, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((m, n))
    w = r.standard_normal(n)
    idx = r.integers(0, n, size=m)

    def build(t, p):
        a = nx.mul(nx.max_axis(p["x"], 0), w)
        b = nx.pick(nx.log_softmax(p["x"], -1), idx)
        c = nx.mean_axes(nx.transpose(nx.reshape(p["x"], (m, n, 1))), axes=(0, 1))
        return nx.add(nx.add(nx.sum_all(a), nx.sum_all(b)), nx.sum_all(nx.mul(c, c)))

    _check(build, {"x": x})


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.sampled_from([1, 3]), c=st.integers(1, 3))
def test_conv_pool_gradients(seed, k, c):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 4, 6, c))
    w = r.standard_normal((2, 2, 3, 2))

    def build(t, p):
        y = nx.maxpool2x2(nx.relu(nx.conv2d(p["x"], p["k"], p["b"], k // 2)))
        return nx.sum_all(nx.mul(y, w))

    _check(build, {"x": x, "k": r.standard_normal((k, k, c, 2)), "b": r.standard_normal(2)})


@settings(max_examples=50, deadline=None)
@given(
    x=st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    shift=st.floats(-100, 100),
)
def test_softmax_normalized_and_shift_invariant(x, shift):
    x = np.array(x)
    y = nx.stable_softmax(x)
    assert abs(y.sum() - 1) <= 1e-12
    np.testing.assert_allclose(nx.stable_softmax(x + shift), y, rtol=0, atol=1e-12)
