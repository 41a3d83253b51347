"""Search strategies: plain DARTS, early stopping (DARTS-ES), adaptive
regularization (DARTS-ADA), four-run selection (R-DARTS) and random search
with weight sharing (RS-ws)."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import curvature
from .bilevel import (EvalProtocol, Regularizers, SearchConfig, SearchState, evaluate,
                      init_state, loss_and_grads, search_epoch, sgd_momentum_step,
                      train_genotype)
from .curvature import EigEntry
from .datagen import Dataset, minibatches
from .rng import derive_seed, stream
from .search_space import Genotype, SpaceSpec, discretize, enumerate_space, init_weights

log = logging.getLogger(__name__)

# number of full searches and retrains issued; tests read these
RUNS: Counter = Counter()

Criterion = Callable[[Sequence[float], int], "int | None"]
EigHook = Callable[[SearchState, SearchConfig, Dataset], EigEntry]


@dataclass
class AdaConfig:
    R: float = 3e-4
    R_max: float = 3e-2
    eta: float = 10.0
    reg_kind: str = "L2"

    def __post_init__(self):
        if self.reg_kind not in ("L2", "DropPath"):
            raise ValueError(f"reg_kind must be L2 or DropPath, got {self.reg_kind!r}")
        if self.eta <= 1.0:
            raise ValueError("eta must exceed 1")


@dataclass
class SearchResult:
    genotype: Genotype
    stop_epoch: int | None
    trace: list[EigEntry]
    config: SearchConfig
    seed: int
    wall_time: float = 0.0
    state: SearchState | None = field(default=None, repr=False)
    segments: list[tuple[int, float]] = field(default_factory=list)  # (start epoch, reg value)
    extras: dict = field(default_factory=dict)

    @property
    def lambda_max(self) -> float | None:
        return self.trace[-1].lambda_max if self.trace else None


def early_stop_criterion(k: int = 5, threshold: float = 0.75) -> Criterion:
    return lambda trace, i: curvature.should_stop(trace, i, k, threshold)


def hessian_eig_hook(spectrum: bool = False, top: int = 30, batch_size: int | None = None) -> EigHook:
    """λ_max of ∇²_α L_valid on one freshly sampled validation batch per epoch.

    ``batch_size`` defaults to the search batch size.
    """

    def hook(state: SearchState, cfg: SearchConfig, data: Dataset) -> EigEntry:
        epoch = state.epoch
        size = min(batch_size or cfg.batch_size, len(data.valid))
        batches = minibatches(data.valid, size, stream(cfg.seed, "eig_batches", epoch))
        batch_id = int(stream(cfg.seed, "eig_pick", epoch).integers(len(batches)))
        H, _ = curvature.alpha_hessian(state, batches[batch_id],
                                       draws=derive_seed(cfg.seed, "eig_draws", epoch))
        lam, _ = curvature.dominant_eigenvalue(H)
        spec = neg = None
        if spectrum:
            vals, neg = curvature.eigenspectrum(H, top)
            spec = tuple(float(v) for v in vals)
        return EigEntry(epoch, lam, batch_id, spec, neg)

    return hook


def _search_loop(state: SearchState, cfg: SearchConfig, data: Dataset, end_epoch: int,
                 eig_hook: EigHook, criterion: Criterion | None):
    """Advance ``state`` to ``end_epoch``; returns (state, rollback epoch or None).

    The criterion sees only the λ_max values recorded since this call started.
    """
    start = state.epoch
    local: list[float] = []
    while state.epoch < end_epoch:
        search_epoch(state, cfg, data)
        entry = eig_hook(state, cfg, data)
        state.eig_trace.append(entry)
        local.append(entry.lambda_max)
        if criterion is not None:
            rb = criterion(local, len(local) - 1)
            if rb is not None:
                stop_epoch = start + rb + 1
                if not start <= stop_epoch <= state.epoch:
                    raise RuntimeError(f"criterion returned rollback epoch {stop_epoch} "
                                       f"outside [{start}, {state.epoch}]")
                return state, stop_epoch
    return state, None


def run_darts(space: SpaceSpec, cfg: SearchConfig, data: Dataset, *,
              criterion: Criterion | None = None, eig_hook: EigHook | None = None,
              k: int | None = None) -> SearchResult:
    """Plain DARTS when ``criterion`` is None, otherwise DARTS-ES."""
    RUNS["search"] += 1
    t0 = time.perf_counter()
    eig_hook = eig_hook or hessian_eig_hook()
    state = init_state(space, cfg.seed)
    state, stop = _search_loop(state, cfg, data, cfg.epochs, eig_hook, criterion)
    alpha = state.snapshots[stop].alpha if stop is not None else state.alpha
    if stop is not None:
        log.info("early stop at epoch %d, returning epoch %d", state.epoch, stop)
    return SearchResult(discretize(alpha, space, k), stop, list(state.eig_trace), cfg, cfg.seed,
                        time.perf_counter() - t0, state, [(0, cfg.l2_factor)])


def darts_es(space: SpaceSpec, cfg: SearchConfig, data: Dataset, *, k_avg: int = 5,
             threshold: float = 0.75, eig_hook: EigHook | None = None,
             k: int | None = None) -> SearchResult:
    return run_darts(space, cfg, data, criterion=early_stop_criterion(k_avg, threshold),
                     eig_hook=eig_hook, k=k)


def with_regularization(cfg: SearchConfig, kind: str, value: float) -> SearchConfig:
    if kind == "L2":
        return dataclasses.replace(cfg, l2_factor=value)
    if kind == "DropPath":
        return dataclasses.replace(cfg, drop_path_max=value)
    raise ValueError(f"unknown regularization kind {kind!r}")


def _within(value: float, limit: float) -> bool:
    # R·η^m accumulates rounding; a level equal to R_max up to rounding still runs
    return value <= limit * (1.0 + 1e-9)


def darts_ada(space: SpaceSpec, cfg: SearchConfig, data: Dataset, ada: AdaConfig | None = None,
              *, criterion: Criterion | None = None, eig_hook: EigHook | None = None,
              k: int | None = None) -> SearchResult:
    """Adaptive regularization.

    Whenever the criterion fires, roll back to the returned epoch's snapshot,
    multiply the regularization by η and continue for the remaining epochs.
    A restart happens only if the increased value stays within R_max, so no
    epoch ever trains above R_max (unless R itself already exceeds it).
    """
    ada = ada or AdaConfig()
    criterion = criterion or early_stop_criterion()
    eig_hook = eig_hook or hessian_eig_hook()
    RUNS["search"] += 1
    t0 = time.perf_counter()
    state = init_state(space, cfg.seed)
    R = ada.R
    segments = [(0, R)]
    adapt = _within(R, ada.R_max)
    stop_epochs = []
    while True:
        run_cfg = with_regularization(cfg, ada.reg_kind, R)
        can_restart = adapt and _within(R * ada.eta, ada.R_max)
        state, stop = _search_loop(state, run_cfg, data, cfg.epochs, eig_hook,
                                   criterion if can_restart else None)
        if stop is None:
            break
        stop_epochs.append(stop)
        state = state.rolled_back(stop)
        R = R * ada.eta
        segments.append((stop, R))
        log.info("DARTS-ADA: restart from epoch %d with %s = %g", stop, ada.reg_kind, R)
    result = SearchResult(discretize(state.alpha, space, k), stop_epochs[-1] if stop_epochs else None,
                          list(state.eig_trace), cfg, cfg.seed, time.perf_counter() - t0, state,
                          segments)
    result.extras["depth"] = len(segments)
    return result


def retrain_scores(candidates: Sequence[Genotype], space: SpaceSpec, data: Dataset,
                   retrain_epochs: int = 25, seed: int = 0,
                   protocol: EvalProtocol | None = None) -> list[float]:
    """Validation error of each candidate after a short from-scratch retrain."""
    protocol = protocol or EvalProtocol()
    if retrain_epochs < 1:
        raise ValueError("retrain_epochs must be >= 1")
    scores = []
    for g in candidates:
        RUNS["retrain"] += 1
        scores.append(train_genotype(g, space, data, protocol, seed, epochs=retrain_epochs)["valid_error"])
    return scores


def select_by_retrain(candidates: Sequence[Genotype], space: SpaceSpec, data: Dataset,
                      retrain_epochs: int = 25, seed: int = 0,
                      protocol: EvalProtocol | None = None) -> Genotype:
    """Argmin validation error; ties go to the earlier candidate."""
    if not candidates:
        raise ValueError("no candidates")
    if len(candidates) == 1:
        return candidates[0]
    scores = retrain_scores(candidates, space, data, retrain_epochs, seed, protocol)
    return candidates[int(np.argmin(scores))]


DEFAULT_R_DARTS = {
    "L2": (3e-4, 9e-4, 27e-4, 81e-4),
    "DropPath": (0.0, 0.2, 0.4, 0.6),
}


def robust_darts(space: SpaceSpec, cfg: SearchConfig, data: Dataset,
                 reg_values: Sequence[float] | None = None, reg_kind: str = "L2", *,
                 retrain_epochs: int = 25, eig_hook: EigHook | None = None,
                 search_fn=None, k: int | None = None,
                 protocol: EvalProtocol | None = None) -> SearchResult:
    """Four searches with increasing regularization, each with its own seed;
    the winner is picked by a short retrain on the validation split.

    Candidates are scored in ascending order of regularization, so a tie goes
    to the weaker setting.
    """
    values = tuple(DEFAULT_R_DARTS[reg_kind] if reg_values is None else reg_values)
    if len(values) != 4:
        raise ValueError("R-DARTS uses exactly four regularization values")
    order = sorted(range(4), key=lambda i: values[i])
    search_fn = search_fn or (lambda c: run_darts(space, c, data, eig_hook=eig_hook, k=k))
    t0 = time.perf_counter()
    runs = []
    for i in order:
        run_cfg = with_regularization(cfg, reg_kind, values[i])
        run_cfg = dataclasses.replace(run_cfg, seed=derive_seed(cfg.seed, "r_darts", i))
        runs.append((values[i], search_fn(run_cfg)))
    candidates = [r.genotype for _, r in runs]
    scores = retrain_scores(candidates, space, data, retrain_epochs, cfg.seed, protocol)
    best = int(np.argmin(scores))
    value, chosen = runs[best]
    result = SearchResult(chosen.genotype, chosen.stop_epoch, chosen.trace, chosen.config,
                          chosen.seed, time.perf_counter() - t0, chosen.state,
                          [(0, value)])
    result.extras.update(candidates=[str(g) for g in candidates], reg_values=[v for v, _ in runs],
                         retrain_valid_errors=scores, chosen_reg=value)
    return result


def random_search_ws(space: SpaceSpec, cfg: SearchConfig, data: Dataset,
                     num_samples: int | None = None, k: int | None = None) -> SearchResult:
    """Random search with weight sharing.

    Each train batch updates the shared weights through one uniformly drawn
    genotype; afterwards ``num_samples`` distinct genotypes are scored on the
    validation split with the shared weights and the best one is returned.
    """
    RUNS["search"] += 1
    t0 = time.perf_counter()
    pool = enumerate_space(space, k)
    num_samples = len(pool) if num_samples is None else num_samples
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    weights = init_weights(space, stream(cfg.seed, "init"))
    mom = {key: np.zeros_like(v) for key, v in weights.items()}
    pick = stream(cfg.seed, "rs_ws_sample")
    for t in range(cfg.epochs):
        reg = Regularizers(l2=cfg.l2_factor, drop_prob=cfg.drop_prob_at(t),
                           mask_frac=cfg.input_mask_frac)
        batches = minibatches(data.train, cfg.batch_size, stream(cfg.seed, "train_order", t))
        for step, b in enumerate(batches):
            g = pool[int(pick.integers(len(pool)))]
            _, gw, _ = loss_and_grads(space, weights, b, genotype=g, reg=reg,
                                      draws=derive_seed(cfg.seed, "train_draws", t, step),
                                      wrt_alpha=False, tag="rs_ws")
            sgd_momentum_step(weights, mom, gw, cfg.lr_at(t), cfg.w_momentum, cfg.grad_clip)
    order = stream(cfg.seed, "rs_ws_eval").permutation(len(pool))[:num_samples]
    errors = []
    for idx in order:
        _, acc = evaluate(space, weights, data.valid, genotype=pool[idx],
                          draws=derive_seed(cfg.seed, "rs_ws_eval_draws"))
        errors.append(1.0 - acc)
    best = pool[order[int(np.argmin(errors))]]
    result = SearchResult(best, None, [], cfg, cfg.seed, time.perf_counter() - t0)
    result.extras["shared_valid_errors"] = {str(pool[i]): e for i, e in zip(order, errors)}
    return result
