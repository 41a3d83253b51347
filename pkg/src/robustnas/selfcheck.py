"""Analytic oracles run by ``robustnas selfcheck``.

Each check returns ``(name, passed, detail)``; none of them touch a dataset.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .bilevel import (QuadraticOuter, QuarticBilinearModel, exact_hypergradient_quadratic,
                      finite_difference_correction, quadratic_inner_solution)
from .curvature import dominant_eigenvalue, hessian_from_gradient, power_iteration_max


def check_primitives(seed: int = 0) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(4, 3))
    cases = {
        "tanh∘matmul": (lambda x, w: ad.sq_norm(ad.tanh(ad.matmul(x, w))), [(4, 5), (5, 3)]),
        "softmax": (lambda x: ad.sum_(ad.mul(ad.softmax(x), ad.Tensor(y))), [(4, 3)]),
        "cross_entropy": (lambda x: ad.cross_entropy(x, np.array([0, 1, 2, 1])), [(4, 3)]),
        "relu": (lambda x: ad.sq_norm(ad.relu(x)), [(4, 3)]),
    }
    worst = 0.0
    for f, shapes in cases.values():
        worst = max(worst, ad.grad_check(f, [rng.normal(size=s) for s in shapes]))
    return "autodiff grad_check", worst < 1e-4, f"max rel err {worst:.2e}"


def check_hypergradient(seed: int = 0, n: int = 4, m: int = 3) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    A = M @ M.T + n * np.eye(n)
    B = rng.normal(size=(n, m))
    P, R = rng.normal(size=(n, n)), rng.normal(size=(m, m))
    outer = QuadraticOuter(P + P.T, rng.normal(size=n), rng.normal(size=(n, m)), R + R.T,
                           rng.normal(size=m))
    y = rng.normal(size=m)

    def total(v):
        return outer.value(v, quadratic_inner_solution(A, B, v))

    h = 1e-4
    num = np.array([(total(y + h * e) - total(y - h * e)) / (2 * h) for e in np.eye(m)])
    err = float(np.max(np.abs(exact_hypergradient_quadratic(A, B, outer, y) - num)))
    return "quadratic hypergradient", err < 1e-8, f"max abs err {err:.2e}"


def check_fd_order() -> tuple[str, bool, str]:
    model = QuarticBilinearModel()
    w, v, xi = {"theta": np.array([0.7])}, {"theta": np.array([1.3])}, 0.5
    exact = model.exact_correction(w, v, xi)
    errs = [abs(finite_difference_correction(model.grad_alpha_train, w, v, xi, s)[0]["alpha"][0]
                - exact) for s in (0.02, 0.01)]
    ratio = errs[0] / errs[1]
    return "finite-difference O(eps^2)", ratio >= 3.5, f"halving ratio {ratio:.3f}"


def check_eigensolvers(seed: int = 0, n: int = 12) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    H = (M + M.T) / 2
    lam_j, _ = dominant_eigenvalue(H)
    lam_p, _ = power_iteration_max(H, rng)
    Q = (M @ M.T) / n
    Hq, _ = hessian_from_gradient(lambda x: Q @ x, rng.normal(size=n))
    err_h = float(np.max(np.abs(Hq - Q)))
    ok = abs(lam_j - lam_p) < 1e-6 and err_h < 1e-5
    return "eigensolvers", ok, f"|jacobi-power| {abs(lam_j - lam_p):.2e}, hessian err {err_h:.2e}"


CHECKS = (check_primitives, check_hypergradient, check_fd_order, check_eigensolvers)


def run_all() -> list[tuple[str, bool, str]]:
    return [check() for check in CHECKS]
