import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coral import diffcore as dc
from oracles import numeric, random_graph, scaled_close


def test_eval_examples():
    assert dc.eval_graph(dc.constant(3.0)) == 3.0
    out = dc.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    np.testing.assert_array_equal(dc.eval_graph(out), [[3.0], [7.0]])
    assert dc.eval_graph(dc.sin(0.0)) == 0.0


def test_shape_errors_name_the_op():
    with pytest.raises(dc.ShapeError, match="matmul"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(dc.ShapeError, match="add"):
        dc.add(np.ones(3), np.ones(4))


def test_non_finite_is_an_error():
    with pytest.raises(dc.NonFiniteError):
        dc.div(1.0, 0.0)
    with pytest.raises(dc.NonFiniteError):
        dc.exp(1e4)


def test_gradient_examples():
    x = dc.variable(3.0)
    (g,) = dc.gradient(dc.square(x), [x])
    assert g.value == 6.0

    x = dc.variable(2.0)
    (g,) = dc.gradient(x * x * x, [x])
    (h,) = dc.gradient(g, [x])
    assert h.value == pytest.approx(12.0, abs=1e-12)

    x = dc.variable(0.0)
    (g,) = dc.gradient(dc.sin(x), [x])
    assert g.value == 1.0


def test_gradient_rejects_non_scalar():
    x = dc.variable(np.ones(3))
    with pytest.raises(dc.NonScalarError):
        dc.gradient(dc.sin(x), [x])


def test_unreachable_gets_zero():
    x, y = dc.variable(np.ones(2)), dc.variable(np.ones(3))
    gx, gy = dc.gradient(dc.total(dc.square(x)), [x, y])
    np.testing.assert_array_equal(gx.value, [2.0, 2.0])
    np.testing.assert_array_equal(gy.value, np.zeros(3))


def test_finite_diff_examples():
    assert dc.finite_diff(lambda x: float(x[0] ** 2), [3.0], 1e-5)[0] == pytest.approx(6.0, abs=1e-9)
    np.testing.assert_array_equal(dc.finite_diff(lambda x: 4.0, np.ones(3)), np.zeros(3))
    g = dc.finite_diff(lambda x: math.sin(x[0]), [1.0], 1e-5)[0]
    assert g == pytest.approx(math.cos(1.0), abs=1e-9)
    with pytest.raises(ValueError):
        dc.finite_diff(lambda x: 0.0, [1.0], 0.0)


@pytest.mark.parametrize("seed", range(100))
def test_random_graph_matches_finite_diff(seed):
    build, x0 = random_graph(seed)
    x = dc.variable(x0)
    (g,) = dc.gradient(build(x), [x])
    ref = dc.finite_diff(numeric(build), x0, 1e-5)
    assert scaled_close(g.value, ref, 1e-6)


def test_hessian_vector_product():
    rng = np.random.default_rng(0)
    x0, v = rng.normal(size=5), rng.normal(size=5)

    def f(x):
        return dc.total(dc.square(dc.sin(x)))

    x = dc.variable(x0)
    (g,) = dc.gradient(f(x), [x])
    (hv,) = dc.gradient(dc.total(g * v), [x])

    def grad_dot_v(y):
        yy = dc.variable(y)
        (gy,) = dc.gradient(f(yy), [yy], create_graph=False)
        return float(gy.value @ v)

    ref = dc.finite_diff(grad_dot_v, x0, 1e-5)
    assert scaled_close(hv.value, ref, 1e-5)
    # closed form: d/dx sum sin^2 = sin 2x, Hessian diag = 2 cos 2x
    np.testing.assert_allclose(hv.value, 2 * np.cos(2 * x0) * v, atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 20))
def test_gradient_is_linear(a, b, seed):
    build_f, x0 = random_graph(seed)
    build_g, _ = random_graph(seed + 1000)
    x = dc.variable(x0)
    (combo,) = dc.gradient(a * build_f(x) + b * build_g(x), [x])
    gf, gg = dc.gradient(build_f(x), [x])[0], dc.gradient(build_g(x), [x])[0]
    np.testing.assert_allclose(combo.value, a * gf.value + b * gg.value, atol=1e-12, rtol=1e-12)


def test_third_order_through_trig():
    # d^3/dx^3 sin x = -cos x
    x = dc.variable(0.7)
    (g1,) = dc.gradient(dc.sin(x), [x])
    (g2,) = dc.gradient(g1, [x])
    (g3,) = dc.gradient(g2, [x])
    assert g3.value == pytest.approx(-math.cos(0.7), abs=1e-14)


def test_first_order_mode_returns_constants():
    x = dc.variable(np.arange(3.0))
    (g,) = dc.gradient(dc.total(dc.square(x)), [x], create_graph=False)
    assert not g.requires_grad


def test_expand_and_sum_axis_adjoint():
    rng = np.random.default_rng(1)
    a0 = rng.normal(size=(3, 1))
    w = rng.normal(size=(2, 3, 4))

    def build(a):
        return dc.total(dc.expand(a, (2, 3, 4)) * w)

    a = dc.variable(a0)
    (g,) = dc.gradient(build(a), [a])
    np.testing.assert_allclose(g.value, w.sum(axis=(0, 2)).reshape(3, 1), atol=1e-12)


def test_index_and_stack_gradients():
    x0 = np.arange(6.0).reshape(2, 3)
    x = dc.variable(x0)
    y = dc.stack([dc.index(x, (0,)), dc.index(x, (1,)) * 2.0])
    (g,) = dc.gradient(dc.total(dc.square(y)), [x])
    np.testing.assert_allclose(g.value, np.stack([2 * x0[0], 8 * x0[1]]))


def test_values_are_immutable():
    n = dc.constant(np.ones(3))
    with pytest.raises(ValueError):
        n.value[0] = 2.0
