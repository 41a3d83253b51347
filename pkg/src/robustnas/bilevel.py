"""Alternating weight/architecture optimization with one-step hypergradients.

Weights ``w`` are trained on the train split with momentum SGD under a cosine
learning-rate schedule; architecture parameters ``α`` are trained on the valid
split with Adam.  The second-order architecture gradient replaces the inner
argmin by a single virtual SGD step and evaluates the resulting mixed
second-derivative term with a central finite difference in weight space.
"""

from __future__ import annotations

import copy
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .datagen import Dataset, Split, feature_mask, minibatches
from .rng import derive_seed, stream
from .search_space import (ArchParams, Genotype, SpaceSpec, init_weights, network_forward,
                           zeros_alpha)

log = logging.getLogger(__name__)

Weights = dict  # name -> ndarray

# incremented per loss/gradient evaluation; tests read these
CALLS: Counter = Counter()


@dataclass
class SearchConfig:
    epochs: int = 50
    batch_size: int = 64
    w_lr: float = 0.025
    w_lr_min: float = 0.001
    w_momentum: float = 0.9
    l2_factor: float = 3e-4
    grad_clip: float = 5.0
    alpha_lr: float = 3e-4
    alpha_l2: float = 1e-3
    alpha_betas: tuple[float, float] = (0.5, 0.999)
    xi: float | None = None  # None ties the virtual step to the current w lr
    order: str = "second"
    drop_path_max: float = 0.0
    input_mask_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.alpha_betas = tuple(self.alpha_betas)
        if self.order not in ("first", "second"):
            raise ValueError(f"order must be 'first' or 'second', got {self.order!r}")
        if self.xi is not None and self.xi < 0:
            raise ValueError("xi must be >= 0")
        if self.l2_factor < 0:
            raise ValueError("l2_factor must be >= 0")
        if not 0.0 <= self.drop_path_max < 1.0:
            raise ValueError("drop_path_max must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Cosine schedule from w_lr (epoch 0) towards w_lr_min (epoch E)."""
        frac = min(epoch, self.epochs) / max(self.epochs, 1)
        return self.w_lr_min + 0.5 * (self.w_lr - self.w_lr_min) * (1.0 + math.cos(math.pi * frac))

    def drop_prob_at(self, epoch: int) -> float:
        return self.drop_path_max * epoch / max(self.epochs, 1)

    def xi_at(self, epoch: int) -> float:
        if self.order == "first":
            return 0.0
        return self.lr_at(epoch) if self.xi is None else self.xi


@dataclass
class Regularizers:
    l2: float = 0.0
    drop_prob: float = 0.0
    mask_frac: float = 0.0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_acc: float
    drop_path_p: float
    l2: float
    lr: float


@dataclass
class Snapshot:
    epoch: int
    weights: Weights
    alpha: ArchParams
    opt: dict


@dataclass
class SearchState:
    space: SpaceSpec
    weights: Weights
    alpha: ArchParams
    momentum: Weights
    adam_m: ArchParams
    adam_v: ArchParams
    adam_t: int = 0
    epoch: int = 0
    snapshots: list[Snapshot] = field(default_factory=list)
    history: list[EpochStats] = field(default_factory=list)
    eig_trace: list = field(default_factory=list)  # curvature.EigEntry per epoch

    def _opt(self) -> dict:
        return {"momentum": copy.deepcopy(self.momentum), "adam_m": copy.deepcopy(self.adam_m),
                "adam_v": copy.deepcopy(self.adam_v), "adam_t": self.adam_t}

    def take_snapshot(self) -> None:
        if len(self.snapshots) != self.epoch:
            raise RuntimeError("snapshots must be indexed densely by epoch")
        self.snapshots.append(Snapshot(self.epoch, copy.deepcopy(self.weights),
                                       copy.deepcopy(self.alpha), self._opt()))

    def rolled_back(self, epoch: int) -> "SearchState":
        """Fresh state restored from the snapshot taken after ``epoch`` epochs."""
        snap = self.snapshots[epoch]
        return SearchState(
            space=self.space, weights=copy.deepcopy(snap.weights), alpha=copy.deepcopy(snap.alpha),
            momentum=copy.deepcopy(snap.opt["momentum"]), adam_m=copy.deepcopy(snap.opt["adam_m"]),
            adam_v=copy.deepcopy(snap.opt["adam_v"]), adam_t=snap.opt["adam_t"], epoch=epoch,
            snapshots=self.snapshots[:epoch + 1], history=self.history[:epoch],
            eig_trace=self.eig_trace[:epoch])


def init_state(space: SpaceSpec, seed: int) -> SearchState:
    """α = 0 (uniform mixtures); weights scaled-uniform from the run seed."""
    weights = init_weights(space, stream(seed, "init"))
    alpha = zeros_alpha(space)
    state = SearchState(space=space, weights=weights, alpha=alpha,
                        momentum={k: np.zeros_like(v) for k, v in weights.items()},
                        adam_m={k: np.zeros_like(v) for k, v in alpha.items()},
                        adam_v={k: np.zeros_like(v) for k, v in alpha.items()})
    state.take_snapshot()
    return state


# -- losses -------------------------------------------------------------------

def loss_and_grads(space: SpaceSpec, weights: Mapping[str, np.ndarray], batch: Split, *,
                   alpha: Mapping[str, np.ndarray] | None = None,
                   genotype: Genotype | None = None,
                   reg: Regularizers | None = None, draws: int | None = None,
                   wrt_w: bool = True, wrt_alpha: bool = True, tag: str = "loss"):
    """Cross-entropy (+ λ/2 ‖w‖²) and its gradients.

    ``draws`` seeds every stochastic element of the forward pass (Noise ops,
    drop-path and feature masks); reusing it freezes them.
    Returns ``(loss, grad_w or None, grad_alpha or None)``.
    """
    CALLS[tag] += 1
    reg = reg or Regularizers()
    rng = np.random.default_rng(draws) if draws is not None else np.random.default_rng(0)
    fmask = feature_mask(len(batch), space.width, reg.mask_frac, rng) if reg.mask_frac > 0 else None
    wrt_alpha = wrt_alpha and alpha is not None
    with Tape() as tape:
        wt = {k: Tensor(v, requires_grad=wrt_w, _check=False) for k, v in weights.items()}
        at = ({ct: Tensor(a, requires_grad=wrt_alpha, _check=False) for ct, a in alpha.items()}
              if alpha is not None else None)
        logits = network_forward(batch.X, space, wt, alpha=at, genotype=genotype, rng=rng,
                                 drop_prob=reg.drop_prob, feature_mask=fmask)
        loss = ad.cross_entropy(logits, batch.y)
        if reg.l2 > 0:
            sq = None
            for t in wt.values():
                s = ad.sq_norm(t)
                sq = s if sq is None else ad.add(sq, s)
            loss = ad.add(loss, ad.scale(sq, reg.l2 / 2.0))
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"{tag}: non-finite loss {value}")
    if not (wrt_w or wrt_alpha):
        return value, None, None
    grads = ad.backward(tape, loss)

    def pick(tensors):
        return {k: grads.get(t.node_id, np.zeros_like(t.data)) for k, t in tensors.items()}

    return value, (pick(wt) if wrt_w else None), (pick(at) if wrt_alpha else None)


def inner_loss(weights, alpha, batch: Split, space: SpaceSpec, reg: Regularizers,
               draws: int | None = None) -> float:
    """Training objective: cross-entropy + λ_w ‖w‖²/2 with drop-path and masking."""
    return loss_and_grads(space, weights, batch, alpha=alpha, reg=reg, draws=draws,
                          wrt_w=False, wrt_alpha=False, tag="train_value")[0]


def evaluate(space: SpaceSpec, weights, split: Split, *, alpha=None, genotype=None,
             draws: int | None = 0) -> tuple[float, float]:
    """(loss, accuracy) without regularizers."""
    rng = np.random.default_rng(draws)
    wt = {k: Tensor(v, _check=False) for k, v in weights.items()}
    at = {ct: Tensor(a, _check=False) for ct, a in alpha.items()} if alpha is not None else None
    logits = network_forward(split.X, space, wt, alpha=at, genotype=genotype, rng=rng)
    loss = ad.cross_entropy(logits, split.y).item()
    acc = float(np.mean(np.argmax(logits.data, axis=1) == split.y))
    return loss, acc


# -- tree helpers -------------------------------------------------------------

def _axpy(x: Mapping, a: float, y: Mapping) -> dict:
    return {k: x[k] + a * y[k] for k in x}


def _norm(x: Mapping) -> float:
    return math.sqrt(sum(float(np.sum(v * v)) for v in x.values()))


# -- hypergradient pieces -----------------------------------------------------

def virtual_step(weights, grad_w: Mapping, xi: float) -> Weights:
    """w* = w − ξ ∇_w L_train; returns a fresh dict."""
    if xi < 0:
        raise ValueError("xi must be >= 0")
    return _axpy(weights, -xi, grad_w)


def virtual_step_from_batch(weights, alpha, batch, space, reg, xi, draws=None) -> Weights:
    _, gw, _ = loss_and_grads(space, weights, batch, alpha=alpha, reg=reg, draws=draws,
                              wrt_alpha=False, tag="train_grad")
    return virtual_step(weights, gw, xi)


def finite_difference_correction(grad_alpha_train, weights: Mapping, direction: Mapping,
                                 xi: float, eps_scale: float = 0.01):
    """(ξ / 2ε) (∇_α L_train(w⁺) − ∇_α L_train(w⁻)) with w± = w ± ε·v.

    ε = eps_scale / ‖v‖₂.  Returns ``(correction, eps)``; ``(None, None)`` when
    ‖v‖ = 0, where ε is undefined.
    """
    norm = _norm(direction)
    if norm == 0.0:
        return None, None
    eps = eps_scale / norm
    g_plus = grad_alpha_train(_axpy(weights, eps, direction))
    g_minus = grad_alpha_train(_axpy(weights, -eps, direction))
    coef = xi / (2.0 * eps)
    return {k: coef * (g_plus[k] - g_minus[k]) for k in g_plus}, eps


def arch_gradient(weights, alpha, train_batch: Split, valid_batch: Split, space: SpaceSpec,
                  *, xi: float, order: str = "second", reg: Regularizers | None = None,
                  train_draws: int | None = None, valid_draws: int | None = None,
                  eps_scale: float = 0.01, info: dict | None = None) -> ArchParams:
    """Architecture gradient.

    First order: ∇_α L_valid(α, w).
    Second order: ∇_α L_valid(α, w*) − (ξ/2ε)(∇_α L_train(α, w⁺) − ∇_α L_train(α, w⁻)),
    w* = w − ξ∇_w L_train(α, w), w± = w ± ε∇_w L_valid(α, w*), ε = 0.01/‖∇_w L_valid(α, w*)‖.
    """
    reg = reg or Regularizers()
    info = info if info is not None else {}
    if order == "first" or xi == 0.0:
        if order == "second" and xi == 0.0:
            log.debug("xi = 0: second-order gradient reduces to first order")
        _, _, ga = loss_and_grads(space, weights, valid_batch, alpha=alpha, draws=valid_draws,
                                  wrt_w=False, tag="valid_grad")
        info.update(eps=None, correction=False)
        return ga
    if order != "second":
        raise ValueError(f"unknown order {order!r}")
    w_star = virtual_step_from_batch(weights, alpha, train_batch, space, reg, xi, train_draws)
    _, gw_val, ga_val = loss_and_grads(space, w_star, valid_batch, alpha=alpha,
                                       draws=valid_draws, tag="valid_grad")

    def grad_alpha_train(w):
        return loss_and_grads(space, w, train_batch, alpha=alpha, reg=reg, draws=train_draws,
                              wrt_w=False, tag="train_grad")[2]

    corr, eps = finite_difference_correction(grad_alpha_train, weights, gw_val, xi, eps_scale)
    info.update(eps=eps, grad_w_valid_norm=_norm(gw_val), correction=corr is not None)
    if corr is None:
        log.warning("zero validation weight-gradient; dropping the second-order correction")
        return ga_val
    return {k: ga_val[k] - corr[k] for k in ga_val}


# -- optimizers ---------------------------------------------------------------

def sgd_momentum_step(weights, momentum, grads, lr, mu, clip: float | None = None) -> None:
    if clip is not None and clip > 0:
        n = _norm(grads)
        if n > clip:
            grads = {k: g * (clip / n) for k, g in grads.items()}
    for k in weights:
        momentum[k] = mu * momentum[k] + grads[k]
        weights[k] = weights[k] - lr * momentum[k]


def adam_step(state: SearchState, grads: ArchParams, cfg: SearchConfig) -> None:
    b1, b2 = cfg.alpha_betas
    state.adam_t += 1
    t = state.adam_t
    for ct, a in state.alpha.items():
        g = grads[ct] + cfg.alpha_l2 * a
        state.adam_m[ct] = b1 * state.adam_m[ct] + (1 - b1) * g
        state.adam_v[ct] = b2 * state.adam_v[ct] + (1 - b2) * g * g
        m_hat = state.adam_m[ct] / (1 - b1 ** t)
        v_hat = state.adam_v[ct] / (1 - b2 ** t)
        state.alpha[ct] = a - cfg.alpha_lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def _check_finite(tree: Mapping, what: str) -> None:
    for k, v in tree.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite {what} in {k}")


def paired_batches(data: Dataset, batch_size: int, seed: int, epoch: int):
    train = minibatches(data.train, batch_size, stream(seed, "train_order", epoch))
    valid = minibatches(data.valid, batch_size, stream(seed, "valid_order", epoch))
    return [(tb, valid[i % len(valid)]) for i, tb in enumerate(train)]


def search_epoch(state: SearchState, cfg: SearchConfig, data: Dataset) -> SearchState:
    """One epoch of alternating updates; mutates and returns ``state``."""
    t = state.epoch
    lr = cfg.lr_at(t)
    xi = cfg.xi_at(t)
    reg = Regularizers(l2=cfg.l2_factor, drop_prob=cfg.drop_prob_at(t), mask_frac=cfg.input_mask_frac)
    space = state.space
    train_losses = []
    for step, (tb, vb) in enumerate(paired_batches(data, cfg.batch_size, cfg.seed, t)):
        td = derive_seed(cfg.seed, "train_draws", t, step)
        vd = derive_seed(cfg.seed, "valid_draws", t, step)
        ga = arch_gradient(state.weights, state.alpha, tb, vb, space, xi=xi, order=cfg.order,
                           reg=reg, train_draws=td, valid_draws=vd)
        _check_finite(ga, "architecture gradient")
        adam_step(state, ga, cfg)
        loss, gw, _ = loss_and_grads(space, state.weights, tb, alpha=state.alpha, reg=reg,
                                     draws=td, wrt_alpha=False, tag="train_grad")
        _check_finite(gw, "weight gradient")
        sgd_momentum_step(state.weights, state.momentum, gw, lr, cfg.w_momentum, cfg.grad_clip)
        train_losses.append(loss)
    _check_finite(state.weights, "weights")
    _check_finite(state.alpha, "alpha")
    v_loss, v_acc = evaluate(space, state.weights, data.valid, alpha=state.alpha,
                             draws=derive_seed(cfg.seed, "epoch_eval", t))
    state.history.append(EpochStats(t + 1, float(np.mean(train_losses)), v_loss, v_acc,
                                    reg.drop_prob, reg.l2, lr))
    state.epoch += 1
    state.take_snapshot()
    return state


# -- discrete-architecture training (evaluation protocol) ---------------------

@dataclass
class EvalProtocol:
    """Fixed retraining recipe, independent of search-time regularization."""

    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    l2: float = 3e-4
    drop_path_max: float = 0.2
    input_mask_frac: float = 0.125
    grad_clip: float = 5.0


def train_genotype(genotype: Genotype, space: SpaceSpec, data: Dataset, protocol: EvalProtocol,
                   seed: int, epochs: int | None = None) -> dict:
    """Train ``genotype`` from scratch; returns weights plus valid/test error."""
    epochs = protocol.epochs if epochs is None else epochs
    weights = init_weights(space, stream(seed, "retrain_init"))
    mom = {k: np.zeros_like(v) for k, v in weights.items()}
    for t in range(epochs):
        frac = t / max(epochs, 1)
        lr = protocol.lr_min + 0.5 * (protocol.lr - protocol.lr_min) * (1 + math.cos(math.pi * frac))
        reg = Regularizers(l2=protocol.l2, drop_prob=protocol.drop_path_max * frac,
                           mask_frac=protocol.input_mask_frac)
        batches = minibatches(data.train, protocol.batch_size, stream(seed, "retrain_order", t))
        for step, b in enumerate(batches):
            _, gw, _ = loss_and_grads(space, weights, b, genotype=genotype, reg=reg,
                                      draws=derive_seed(seed, "retrain_draws", t, step),
                                      wrt_alpha=False, tag="retrain")
            sgd_momentum_step(weights, mom, gw, lr, protocol.momentum, protocol.grad_clip)
    _check_finite(weights, "retrained weights")
    _, v_acc = evaluate(space, weights, data.valid, genotype=genotype, draws=derive_seed(seed, "ev"))
    _, t_acc = evaluate(space, weights, data.test, genotype=genotype, draws=derive_seed(seed, "et"))
    return {"weights": weights, "valid_error": 1.0 - v_acc, "test_error": 1.0 - t_acc}


# -- analytic oracles ---------------------------------------------------------

@dataclass
class QuadraticOuter:
    """F(y, θ) = ½θᵀPθ + qᵀθ + θᵀSy + ½yᵀRy + sᵀy."""

    P: np.ndarray
    q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    s: np.ndarray

    def value(self, y, theta) -> float:
        return float(0.5 * theta @ self.P @ theta + self.q @ theta + theta @ self.S @ y
                     + 0.5 * y @ self.R @ y + self.s @ y)

    def d_theta(self, y, theta) -> np.ndarray:
        return self.P @ theta + self.q + self.S @ y

    def d_y(self, y, theta) -> np.ndarray:
        return self.R @ y + self.s + self.S.T @ theta


def quadratic_inner_solution(A, B, y) -> np.ndarray:
    """argmin_θ ½θᵀAθ − θᵀBy = A⁻¹By, A symmetric positive definite."""
    A = np.asarray(A, dtype=np.float64)
    if not np.allclose(A, A.T):
        raise ValueError("A must be symmetric")
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as err:
        raise ValueError("A is singular or not positive definite") from err
    return np.linalg.solve(L.T, np.linalg.solve(L, B @ y))


def exact_hypergradient_quadratic(A, B, outer: QuadraticOuter, y) -> np.ndarray:
    """dF/dy = ∂F/∂y − (∂²f/∂θ∂y)ᵀ (∇²_θ f)⁻¹ ∂F/∂θ for f = ½θᵀAθ − θᵀBy.

    With ∇²_θ f = A and ∂²f/∂θ∂y = −B this is ∂F/∂y + Bᵀ A⁻¹ ∂F/∂θ at θ*(y).
    """
    y = np.asarray(y, dtype=np.float64)
    theta = quadratic_inner_solution(A, B, y)
    adj = quadratic_inner_solution(A, np.eye(len(theta)), outer.d_theta(y, theta))
    return outer.d_y(y, theta) + B.T @ adj


def one_step_hypergradient_quadratic(A, B, outer: QuadraticOuter, y, theta0, xi) -> np.ndarray:
    """One virtual step from θ₀, then ∂F/∂y(w*) − ξ ∇²_{y,θ} f · ∂F/∂θ(w*)."""
    w_star = theta0 - xi * (A @ theta0 - B @ y)
    return outer.d_y(y, w_star) + xi * B.T @ outer.d_theta(y, w_star)


class QuarticBilinearModel:
    """Scalar bilevel toy: L_train = α θ⁴/4, L_valid = (θ − 1)².

    The mixed derivative ∂²L_train/∂α∂θ = θ³ is cubic in θ, so the central
    difference used for the correction term carries an O(ε²) error that can
    be measured in closed form.
    """

    def grad_alpha_train(self, w):
        return {"alpha": np.array([w["theta"][0] ** 4 / 4.0])}

    def grad_w_valid(self, w):
        return {"theta": 2.0 * (w["theta"] - 1.0)}

    def exact_correction(self, w, direction, xi):
        """ξ · ∂²L_train/∂α∂θ(w) · v for a weight-space direction v."""
        return xi * w["theta"][0] ** 3 * direction["theta"][0]
