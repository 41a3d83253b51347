import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustnas.bilevel import init_state
from robustnas.curvature import (ConvergenceError, alpha_hessian, dominant_eigenvalue,
                                 eigenspectrum, hessian_from_gradient, jacobi_eigh,
                                 local_average, power_iteration_max, should_stop)
from robustnas.datagen import make_spirals
from robustnas.search_space import get_space


def _sym(rng, n):
    M = rng.normal(size=(n, n))
    return (M + M.T) / 2


def test_hessian_of_quadratic_recovers_matrix():
    rng = np.random.default_rng(0)
    Q = _sym(rng, 6)
    H, asym = hessian_from_gradient(lambda x: Q @ x, rng.normal(size=6))
    np.testing.assert_allclose(H, Q, atol=1e-9)
    assert asym < 1e-9


def test_hessian_xy_example():
    H, _ = hessian_from_gradient(lambda v: np.array([v[1], v[0]]), np.zeros(2))
    np.testing.assert_allclose(H, [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)


def test_hessian_error_shrinks_with_step():
    # f = Σ sin(x_i) x_{i+1}: gradient is non-polynomial, FD error is O(h²)
    def grad(x):
        g = np.zeros_like(x)
        g[:-1] += np.cos(x[:-1]) * x[1:]
        g[1:] += np.sin(x[:-1])
        return g

    x = np.array([0.3, -1.1, 0.8, 2.0])
    n = len(x)
    exact = np.zeros((n, n))
    for i in range(n - 1):
        exact[i, i] = -np.sin(x[i]) * x[i + 1]
        exact[i, i + 1] = exact[i + 1, i] = np.cos(x[i])
    e1 = np.abs(hessian_from_gradient(grad, x, 1e-2)[0] - exact).max()
    e2 = np.abs(hessian_from_gradient(grad, x, 5e-3)[0] - exact).max()
    assert e1 / e2 >= 3.5


def test_alpha_hessian_is_nearly_symmetric():
    space = get_space("T5")
    data = make_spirals(40, 60, 10, seed=0)
    state = init_state(space, 0)
    rng = np.random.default_rng(1)
    state.alpha = {ct: rng.normal(size=a.shape) for ct, a in state.alpha.items()}
    H, asym = alpha_hessian(state, data.valid)
    assert H.shape == (space.alpha_size, space.alpha_size)
    assert asym < 1e-4
    np.testing.assert_array_equal(H, H.T)


def test_jacobi_examples():
    vals, _ = jacobi_eigh(np.diag([3.0, 1.0, 2.0]))
    assert sorted(vals) == [1.0, 2.0, 3.0]
    vals, vecs = jacobi_eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(sorted(vals), [1.0, 3.0], atol=1e-14)
    lam, v = dominant_eigenvalue(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert lam == pytest.approx(3.0)
    np.testing.assert_allclose(np.abs(v), [2 ** -0.5] * 2, atol=1e-12)


def test_jacobi_rejects_bad_input():
    with pytest.raises(ValueError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        jacobi_eigh(np.ones((2, 3)))
    with pytest.raises(ConvergenceError):
        jacobi_eigh(_sym(np.random.default_rng(0), 8), max_sweeps=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10))
def test_jacobi_reconstructs_matrix(seed, n):
    A = _sym(np.random.default_rng(seed), n)
    vals, V = jacobi_eigh(A)
    np.testing.assert_allclose(V @ np.diag(vals) @ V.T, A, atol=1e-10)
    np.testing.assert_allclose(V.T @ V, np.eye(n), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_power_iteration_agrees_with_jacobi(seed):
    H = _sym(np.random.default_rng(seed), 12)
    lam_j, _ = dominant_eigenvalue(H)
    lam_p, v = power_iteration_max(H, np.random.default_rng(seed + 1))
    assert abs(lam_j - lam_p) < 1e-6
    # Rayleigh quotients never exceed λ_max
    x = np.random.default_rng(seed + 2).normal(size=12)
    assert x @ H @ x / (x @ x) <= lam_j + 1e-12


def test_power_iteration_negative_definite():
    lam, _ = power_iteration_max(np.diag([-1.0, -5.0, -2.0]))
    assert lam == pytest.approx(-1.0, abs=1e-8)


def test_spectrum_ordering_and_trace():
    rng = np.random.default_rng(3)
    H = _sym(rng, 9)
    vals, neg = eigenspectrum(H)
    assert np.all(np.diff(np.abs(vals)) <= 1e-12)
    assert vals.sum() == pytest.approx(np.trace(H), abs=1e-10)
    assert neg == int(np.sum(np.linalg.eigvalsh(H) < 0))
    assert len(eigenspectrum(H, top=4)[0]) == 4


def test_local_average_trailing_window():
    trace = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    assert local_average(trace, 0, 5) == 1.0
    assert local_average(trace, 2, 5) == 2.0
    assert local_average(trace, 5, 5) == 4.0
    with pytest.raises(IndexError):
        local_average(trace, 6, 5)
    with pytest.raises(ValueError):
        local_average([], 0, 5)


def test_should_stop_on_hand_derived_trace():
    trace = [1.0] * 9 + [2.0, 3.0, 4.0, 5.0]
    fired = [i for i in range(len(trace)) if should_stop(trace, i) is not None]
    # first fires at 0-based index 10 (epoch 11), rolling back to index 5 (epoch 6)
    assert fired[0] == 10
    assert should_stop(trace, 10) == 5


@pytest.mark.parametrize("trace", [[2.0] * 30, list(np.linspace(10, 1, 30)), [0.0] * 30])
def test_should_stop_never_fires_on_flat_or_decreasing(trace):
    assert all(should_stop(trace, i) is None for i in range(len(trace)))


def test_dominant_eigenvalue_is_largest_algebraic():
    lam, v = dominant_eigenvalue(np.diag([3.0, 1.0, -5.0]))
    assert lam == 3.0
    np.testing.assert_allclose(np.abs(v), [1.0, 0.0, 0.0], atol=1e-14)
    lam, v = dominant_eigenvalue(np.eye(4))
    assert lam == pytest.approx(1.0) and np.linalg.norm(v) == pytest.approx(1.0)


def test_spectrum_orders_by_magnitude():
    vals, neg = eigenspectrum(np.diag([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(vals, [-2.0, 1.0, 0.5])
    assert neg == 1


def test_local_average_on_rising_tail():
    trace = [1.0] * 10 + [2.0, 3.0, 4.0, 5.0]
    assert local_average(trace, 13, 5) == 3.0


def test_hessian_of_half_squared_norm_and_planted_quadratic():
    H, _ = hessian_from_gradient(lambda a: a.copy(), np.random.default_rng(0).normal(size=5))
    np.testing.assert_allclose(H, np.eye(5), atol=1e-6)
    M = _sym(np.random.default_rng(1), 4)
    H, _ = hessian_from_gradient(lambda a: M @ a, np.ones(4))
    np.testing.assert_allclose(H, M, atol=1e-5)
