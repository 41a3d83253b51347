"""Curvature of the validation loss w.r.t. architecture parameters.

Hessians come from central differences of autodiff gradients.  Eigenvalues
come from a cyclic Jacobi sweep, with shifted power iteration as an
independent cross-check.  The early-stopping rule compares trailing local
averages of the dominant-eigenvalue trace.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .bilevel import SearchState, loss_and_grads
from .datagen import Split
from .search_space import flatten_alpha, unflatten_alpha

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class EigEntry:
    epoch: int
    lambda_max: float
    batch_id: int | None = None
    spectrum: tuple[float, ...] | None = None
    num_negative: int | None = None


@dataclass
class EigTrace:
    """Append-only per-epoch record of λ_max."""

    entries: list[EigEntry] = field(default_factory=list)

    def append(self, entry: EigEntry) -> None:
        self.entries.append(entry)

    def values(self) -> list[float]:
        return [e.lambda_max for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def default_step(alpha_flat: np.ndarray) -> float:
    return 1e-3 * max(1.0, float(np.max(np.abs(alpha_flat))) if alpha_flat.size else 1.0)


def hessian_from_gradient(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                          h: float | None = None) -> tuple[np.ndarray, float]:
    """Central-difference Hessian of a gradient oracle, symmetrized.

    Returns ``(H, asymmetry)`` with asymmetry = max |H_raw − H_rawᵀ| before
    symmetrization.
    """
    x = np.asarray(x, dtype=np.float64)
    h = default_step(x) if h is None else h
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    n = x.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        H[:, j] = (grad_fn(x + e) - grad_fn(x - e)) / (2.0 * h)
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("non-finite Hessian entries")
    asym = float(np.max(np.abs(H - H.T))) if n else 0.0
    return 0.5 * (H + H.T), asym


def alpha_hessian(state: SearchState, valid_batch: Split, h: float | None = None,
                  draws: int = 0) -> tuple[np.ndarray, float]:
    """∇²_α L_valid at the state's (w, α); all stochastic draws frozen by ``draws``."""
    space = state.space

    def grad_fn(flat):
        _, _, ga = loss_and_grads(space, state.weights, valid_batch,
                                  alpha=unflatten_alpha(flat, space), draws=draws,
                                  wrt_w=False, tag="hessian")
        return flatten_alpha(ga, space)

    return hessian_from_gradient(grad_fn, flatten_alpha(state.alpha, space), h)


def jacobi_eigh(A: np.ndarray, max_sweeps: int = 100, tol: float = 1e-14):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` unsorted; column i of the vector
    matrix pairs with eigenvalue i.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"square matrix required, got {A.shape}")
    if not np.allclose(A, A.T, atol=1e-12 * max(1.0, np.max(np.abs(A), initial=0.0))):
        raise ValueError("matrix is not symmetric")
    n = A.shape[0]
    V = np.eye(n)
    scale = max(np.linalg.norm(A), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(np.triu(A, 1) ** 2)) * 2.0)
        if off <= tol * scale:
            return np.diag(A).copy(), V
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # θ² would overflow
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/cols p and q
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")


def dominant_eigenvalue(H: np.ndarray) -> tuple[float, np.ndarray]:
    """Largest algebraic eigenvalue and its unit eigenvector."""
    vals, vecs = jacobi_eigh(H)
    i = int(np.argmax(vals))
    v = vecs[:, i]
    return float(vals[i]), v / np.linalg.norm(v)


def power_iteration_max(H: np.ndarray, rng: np.random.Generator | None = None,
                        max_iter: int = 200_000, tol: float = 1e-13) -> tuple[float, np.ndarray]:
    """Largest algebraic eigenvalue via power iteration on H + σI.

    σ is the max absolute row sum of H, which bounds the spectral radius, so
    the shifted matrix is positive semidefinite and its dominant eigenvalue is
    λ_max + σ.
    """
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    sigma = float(np.max(np.sum(np.abs(H), axis=1))) if n else 0.0
    M = H + sigma * np.eye(n)
    rng = rng or np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = v @ M @ v
    for _ in range(max_iter):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return -sigma, v
        v = w / nw
        new = v @ M @ v
        if abs(new - lam) <= tol * max(1.0, abs(new)) and np.linalg.norm(M @ v - new * v) <= 1e-9 * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return float(lam - sigma), v


def eigenspectrum(H: np.ndarray, top: int = 30) -> tuple[np.ndarray, int]:
    """Eigenvalues sorted by magnitude (largest first), truncated to ``top``,
    plus the number of negative eigenvalues in the full spectrum."""
    vals, _ = jacobi_eigh(H)
    order = sorted(range(len(vals)), key=lambda i: (-abs(vals[i]), -vals[i]))
    return vals[order][:top], int(np.sum(vals < 0))


def local_average(trace: Sequence[float], i: int, k: int = 5) -> float:
    """Trailing mean of entries max(0, i−k+1)..i (0-based)."""
    if len(trace) == 0:
        raise ValueError("empty eigenvalue trace")
    if i < 0 or i >= len(trace):
        raise IndexError(f"index {i} outside trace of length {len(trace)}")
    window = trace[max(0, i - k + 1):i + 1]
    return float(np.mean(window))


def should_stop(trace: Sequence[float], i: int, k: int = 5, threshold: float = 0.75) -> int | None:
    """Early-stopping check at 0-based index ``i``.

    Fires when λ̄(i−k) / λ̄(i) < threshold and returns the rollback index i−k.
    """
    if i < k:
        return None
    current = local_average(trace, i, k)
    if current == 0.0:
        log.info("local average of λ_max is zero at %d; not stopping", i)
        return None
    if local_average(trace, i - k, k) / current < threshold:
        return i - k
    return None
