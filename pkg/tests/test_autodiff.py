import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robustnas import autodiff as ad
from robustnas.autodiff import Tape, Tensor, grad_check, value_and_grad


def test_matmul_shape_rule():
    out = ad.apply_primitive("matmul", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert out.shape == (2, 4)


def test_matmul_shape_mismatch_names_primitive():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 4\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


def test_add_shape_mismatch():
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_cross_entropy_uniform_is_ln2():
    logits = Tensor(np.zeros((5, 2)))
    for label in (0, 1):
        loss = ad.cross_entropy(logits, np.full(5, label))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_square_derivative():
    _, (g,) = value_and_grad(lambda x: ad.mul(x, x), [np.array(3.0)])
    assert g == pytest.approx(6.0)


def test_unused_leaf_gets_zero_gradient():
    with Tape() as tape:
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        y = ad.sum_(x)
    gx, gu = tape.gradient(y, [x, unused])
    np.testing.assert_array_equal(gx, [1.0, 1.0])
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_non_scalar_root_rejected():
    with Tape() as tape:
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ad.scale(x, 2.0)
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(tape, y)


def test_non_finite_detected():
    with pytest.raises(ad.NonFiniteError):
        Tensor([1.0, np.nan])
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
        ad.scale(Tensor([1e308]), 10.0)


def test_tape_is_topological():
    with Tape() as tape:
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = ad.tanh(ad.matmul(x, x))
        ad.sum_(ad.mul(y, x))
    seen = {x.node_id}
    for entry in tape.entries:
        assert all(i is None or i in seen for i in entry.inputs)
        seen.add(entry.output)


def test_grad_check_linear_function():
    err = grad_check(ad.sum_, [np.random.default_rng(0).normal(size=(3, 2))])
    assert err < 1e-9


def test_grad_check_squared_norm():
    _, (g,) = value_and_grad(ad.sq_norm, [np.array([1.0, 2.0])])
    np.testing.assert_allclose(g, [2.0, 4.0])
    assert grad_check(ad.sq_norm, [np.array([1.0, 2.0])]) < 1e-8


def test_grad_check_reports_nonfinite():
    def f(x):
        if abs(float(x.data[0])) > 0:
            return Tensor(np.inf, _check=False)
        return ad.sum_(x)

    with pytest.raises(ad.NonFiniteError):
        grad_check(f, [np.array([0.0])])


def test_softmax_linear_composition_matches_fd():
    rng = np.random.default_rng(3)
    y = rng.normal(size=(4, 3))

    def f(x, w):
        return ad.sum_(ad.mul(ad.softmax(ad.matmul(x, w)), Tensor(y)))

    assert grad_check(f, [rng.normal(size=(4, 5)), rng.normal(size=(5, 3))]) < 1e-4


def test_backward_deterministic():
    rng = np.random.default_rng(1)
    x0, w0 = rng.normal(size=(6, 4)), rng.normal(size=(4, 2))
    labels = rng.integers(0, 2, size=6)
    with Tape() as tape:
        x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
        loss = ad.cross_entropy(ad.tanh(ad.matmul(x, w)), labels)
    first = tape.gradient(loss, [x, w])
    second = tape.gradient(loss, [x, w])
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_slice_and_concat_roundtrip_gradients():
    def f(a, b):
        c = ad.concat([a, b], axis=1)
        return ad.sq_norm(ad.slice_(c, (slice(None), slice(1, 4))))

    rng = np.random.default_rng(5)
    assert grad_check(f, [rng.normal(size=(3, 2)), rng.normal(size=(3, 3))]) < 1e-6


def test_mask_rejects_broadcasting_mask():
    with pytest.raises(ad.ShapeError):
        ad.mask(Tensor(np.ones(3)), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s >= 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-30, 30)))
def test_log_softmax_consistent_with_softmax(x):
    np.testing.assert_allclose(np.exp(ad.log_softmax(Tensor(x)).data),
                               ad.softmax(Tensor(x)).data, atol=1e-12)
