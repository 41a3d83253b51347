import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustnas import bilevel as bl
from robustnas.bilevel import (CALLS, EvalProtocol, QuadraticOuter, QuarticBilinearModel,
                               Regularizers, SearchConfig, arch_gradient,
                               exact_hypergradient_quadratic, finite_difference_correction,
                               init_state, loss_and_grads, one_step_hypergradient_quadratic,
                               quadratic_inner_solution, search_epoch, virtual_step)
from robustnas.datagen import make_spirals
from robustnas.search_space import Genotype, OpKind, get_space


@pytest.fixture(scope="module")
def data():
    return make_spirals(48, 48, 100, seed=0)


@pytest.fixture(scope="module")
def t5():
    return get_space("T5")


def _random_alpha(space, seed):
    rng = np.random.default_rng(seed)
    return {ct: rng.normal(size=(space.num_edges, space.num_ops)) for ct in space.cell_types}


def test_cosine_schedule_endpoints():
    cfg = SearchConfig(epochs=10, w_lr=0.1, w_lr_min=0.001)
    assert cfg.lr_at(0) == pytest.approx(0.1)
    assert cfg.lr_at(5) == pytest.approx(0.0505)
    assert cfg.lr_at(10) == pytest.approx(0.001)
    assert cfg.xi_at(3) == cfg.lr_at(3)
    assert SearchConfig(xi=0.02).xi_at(3) == 0.02
    assert SearchConfig(order="first").xi_at(0) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(order="third")
    with pytest.raises(ValueError):
        SearchConfig(drop_path_max=1.0)


def test_l2_term_identities(t5, data):
    state = init_state(t5, 0)
    batch = data.train
    alpha = _random_alpha(t5, 1)
    lam = 0.01
    l0, g0, _ = loss_and_grads(t5, state.weights, batch, alpha=alpha, wrt_alpha=False)
    l1, g1, _ = loss_and_grads(t5, state.weights, batch, alpha=alpha, reg=Regularizers(l2=lam),
                               wrt_alpha=False)
    sq = sum(float(np.sum(w * w)) for w in state.weights.values())
    assert l1 - l0 == pytest.approx(lam / 2 * sq, rel=1e-10)
    for k, w in state.weights.items():
        np.testing.assert_allclose(g1[k] - g0[k], lam * w, atol=1e-12)


def test_weight_and_alpha_gradients_match_finite_differences(t5, data):
    state = init_state(t5, 2)
    batch = data.train
    alpha = _random_alpha(t5, 3)
    _, gw, ga = loss_and_grads(t5, state.weights, batch, alpha=alpha)
    h = 1e-6

    def f(w, a):
        return loss_and_grads(t5, w, batch, alpha=a, wrt_w=False, wrt_alpha=False)[0]

    for key, idx in [("stem.W", (1, 3)), ("normal.e1.W", (2, 5)), ("head.b", (0,))]:
        wp, wm = copy.deepcopy(state.weights), copy.deepcopy(state.weights)
        wp[key][idx] += h
        wm[key][idx] -= h
        assert gw[key][idx] == pytest.approx((f(wp, alpha) - f(wm, alpha)) / (2 * h), abs=1e-7)
    for ct in t5.cell_types:
        for idx in [(0, 0), (1, 2)]:
            ap, am = copy.deepcopy(alpha), copy.deepcopy(alpha)
            ap[ct][idx] += h
            am[ct][idx] -= h
            num = (f(state.weights, ap) - f(state.weights, am)) / (2 * h)
            assert ga[ct][idx] == pytest.approx(num, abs=1e-7)


def test_virtual_step_example():
    w = {"a": np.array([1.0, 2.0])}
    out = virtual_step(w, {"a": np.array([0.5, -1.0])}, 0.1)
    np.testing.assert_allclose(out["a"], [0.95, 2.1])
    np.testing.assert_array_equal(w["a"], [1.0, 2.0])
    with pytest.raises(ValueError):
        virtual_step(w, w, -0.1)


def test_xi_zero_equals_first_order(t5, data):
    state = init_state(t5, 0)
    alpha = _random_alpha(t5, 4)
    tb, vb = data.train, data.valid
    first = arch_gradient(state.weights, alpha, tb, vb, t5, xi=0.5, order="first")
    zero = arch_gradient(state.weights, alpha, tb, vb, t5, xi=0.0, order="second")
    for ct in first:
        np.testing.assert_array_equal(first[ct], zero[ct])


def test_first_order_never_touches_train_gradient(t5, data):
    state = init_state(t5, 0)
    CALLS.clear()
    arch_gradient(state.weights, state.alpha, data.train, data.valid, t5, xi=0.1, order="first")
    assert CALLS["train_grad"] == 0 and CALLS["valid_grad"] == 1
    CALLS.clear()
    arch_gradient(state.weights, state.alpha, data.train, data.valid, t5, xi=0.1, order="second")
    # one for w*, two for the central difference
    assert CALLS["train_grad"] == 3 and CALLS["valid_grad"] == 1


def test_epsilon_rule(t5, data):
    state = init_state(t5, 1)
    info = {}
    arch_gradient(state.weights, _random_alpha(t5, 0), data.train, data.valid, t5, xi=0.05,
                  info=info)
    assert info["correction"]
    assert info["eps"] * info["grad_w_valid_norm"] == pytest.approx(0.01, rel=1e-12)


def test_zero_direction_drops_correction():
    corr, eps = finite_difference_correction(lambda w: w, {"a": np.ones(2)}, {"a": np.zeros(2)}, 0.1)
    assert corr is None and eps is None


@pytest.mark.parametrize("xi", [0.01, 0.1])
def test_second_order_matches_unrolled_objective(t5, data, xi):
    """The one-step gradient is the α-gradient of L_valid(α, w − ξ∇_w L_train(α, w))."""
    state = init_state(t5, 5)
    alpha = _random_alpha(t5, 6)
    reg = Regularizers(l2=3e-4)
    tb, vb = data.train, data.valid

    def unrolled(a):
        w_star = bl.virtual_step_from_batch(state.weights, a, tb, t5, reg, xi)
        return loss_and_grads(t5, w_star, vb, alpha=a, wrt_w=False, wrt_alpha=False)[0]

    got = arch_gradient(state.weights, alpha, tb, vb, t5, xi=xi, reg=reg)
    h = 1e-5
    for ct in t5.cell_types:
        for idx in np.ndindex(alpha[ct].shape):
            ap, am = copy.deepcopy(alpha), copy.deepcopy(alpha)
            ap[ct][idx] += h
            am[ct][idx] -= h
            num = (unrolled(ap) - unrolled(am)) / (2 * h)
            assert abs(got[ct][idx] - num) <= 1e-3 * max(1.0, abs(num))


def test_finite_difference_error_is_second_order():
    model = QuarticBilinearModel()
    w = {"theta": np.array([0.7])}
    v = {"theta": np.array([1.3])}
    xi = 0.5
    exact = model.exact_correction(w, v, xi)
    errs = []
    for scale in (0.1, 0.05, 0.025):
        corr, eps = finite_difference_correction(model.grad_alpha_train, w, v, xi, eps_scale=scale)
        errs.append(abs(corr["alpha"][0] - exact))
        # closed form of the central-difference error: ξ θ ε² v³
        assert errs[-1] == pytest.approx(xi * 0.7 * eps ** 2 * 1.3 ** 3, rel=1e-6)
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=1e-3)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=1e-3)


def _quadratic_problem(seed, n=3, m=2):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    A = M @ M.T + n * np.eye(n)
    B = rng.normal(size=(n, m))
    P = rng.normal(size=(n, n))
    R = rng.normal(size=(m, m))
    outer = QuadraticOuter(P + P.T, rng.normal(size=n), rng.normal(size=(n, m)), R + R.T,
                           rng.normal(size=m))
    return A, B, outer, rng.normal(size=m)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_exact_hypergradient_matches_numeric(seed):
    A, B, outer, y = _quadratic_problem(seed)

    def total(y_):
        return outer.value(y_, quadratic_inner_solution(A, B, y_))

    got = exact_hypergradient_quadratic(A, B, outer, y)
    h = 1e-4
    num = np.array([(total(y + h * e) - total(y - h * e)) / (2 * h) for e in np.eye(len(y))])
    np.testing.assert_allclose(got, num, atol=1e-8 * max(1.0, np.abs(num).max()))


def test_hypergradient_without_coupling_is_partial():
    A, B, outer, y = _quadratic_problem(1)
    B = np.zeros_like(B)
    theta = quadratic_inner_solution(A, B, y)
    np.testing.assert_allclose(exact_hypergradient_quadratic(A, B, outer, y),
                               outer.d_y(y, theta), atol=1e-14)


def test_singular_inner_hessian_rejected():
    _, B, outer, y = _quadratic_problem(2)
    with pytest.raises(ValueError, match="singular"):
        exact_hypergradient_quadratic(np.zeros((3, 3)), B, outer, y)


def test_one_step_exact_when_step_inverts_hessian():
    # with A = I/ξ the virtual step lands on θ* from any start
    _, B, outer, y = _quadratic_problem(3)
    xi = 0.25
    A = np.eye(3) / xi
    exact = exact_hypergradient_quadratic(A, B, outer, y)
    one = one_step_hypergradient_quadratic(A, B, outer, y, np.array([5.0, -2.0, 1.0]), xi)
    np.testing.assert_allclose(one, exact, atol=1e-12)


def _frozen(state):
    return copy.deepcopy(state.weights), copy.deepcopy(state.alpha)


def test_zero_learning_rates_leave_parameters_fixed(t5, data):
    cfg = SearchConfig(epochs=2, batch_size=16, w_lr=0.0, w_lr_min=0.0, alpha_lr=0.0)
    state = init_state(t5, 0)
    w0, a0 = _frozen(state)
    search_epoch(state, cfg, data)
    for k in w0:
        np.testing.assert_array_equal(state.weights[k], w0[k])
    for k in a0:
        np.testing.assert_array_equal(state.alpha[k], a0[k])


def test_search_is_deterministic(t5, data):
    cfg = SearchConfig(epochs=2, batch_size=16, alpha_lr=1e-2, seed=3)
    runs = []
    for _ in range(2):
        state = init_state(t5, cfg.seed)
        for _ in range(2):
            search_epoch(state, cfg, data)
        runs.append(state)
    for k in runs[0].weights:
        assert np.array_equal(runs[0].weights[k], runs[1].weights[k])
    for k in runs[0].alpha:
        assert np.array_equal(runs[0].alpha[k], runs[1].alpha[k])


def test_search_reduces_training_loss(t5, data):
    cfg = SearchConfig(epochs=8, batch_size=16, w_lr=0.1, alpha_lr=1e-2, order="first")
    state = init_state(t5, 0)
    for _ in range(cfg.epochs):
        search_epoch(state, cfg, data)
    losses = [h.train_loss for h in state.history]
    assert losses[-1] < losses[0]
    assert len(state.snapshots) == cfg.epochs + 1


def test_rollback_restores_snapshot(t5, data):
    cfg = SearchConfig(epochs=3, batch_size=16, alpha_lr=1e-2, order="first")
    state = init_state(t5, 0)
    for _ in range(3):
        search_epoch(state, cfg, data)
    back = state.rolled_back(1)
    assert back.epoch == 1 and len(back.history) == 1
    for ct in back.alpha:
        np.testing.assert_array_equal(back.alpha[ct], state.snapshots[1].alpha[ct])
    # resuming from the rollback replays the same epoch
    search_epoch(back, cfg, data)
    for ct in back.alpha:
        np.testing.assert_array_equal(back.alpha[ct], state.snapshots[2].alpha[ct])


def test_first_adam_step_is_signed_lr(t5):
    state = init_state(t5, 0)
    cfg = SearchConfig(alpha_lr=0.01, alpha_l2=0.0)
    g = {ct: np.where(np.arange(a.size).reshape(a.shape) % 2, 1.0, -2.0)
         for ct, a in state.alpha.items()}
    bl.adam_step(state, g, cfg)
    for ct in state.alpha:
        np.testing.assert_allclose(state.alpha[ct], -0.01 * np.sign(g[ct]), rtol=1e-6)


def test_gradient_clipping():
    w = {"a": np.zeros(2)}
    mom = {"a": np.zeros(2)}
    bl.sgd_momentum_step(w, mom, {"a": np.array([30.0, 40.0])}, 1.0, 0.9, clip=5.0)
    np.testing.assert_allclose(w["a"], [-3.0, -4.0])


def test_retraining_a_linear_genotype_beats_chance(t5, data):
    g = Genotype.from_dict({"normal": {0: OpKind.LINEAR_TANH, 1: OpKind.LINEAR_TANH},
                            "reduction": {0: OpKind.LINEAR_TANH, 1: OpKind.LINEAR_TANH}})
    out = bl.train_genotype(g, t5, data, EvalProtocol(epochs=20), seed=0)
    assert out["test_error"] < 0.4
    zero = Genotype.from_dict({ct: {0: OpKind.ZERO, 1: OpKind.ZERO} for ct in ("normal", "reduction")})
    assert bl.train_genotype(zero, t5, data, EvalProtocol(epochs=2), seed=0)["test_error"] >= 0.4
