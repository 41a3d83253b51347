"""Cell search spaces: candidate ops, softmax-mixed edges, the stacked network,
discretization to genotypes, and exhaustive enumeration."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CELL_TYPES = ("normal", "reduction")
_CELL_CODE = {"normal": "n", "reduction": "r"}
_CODE_CELL = {v: k for k, v in _CELL_CODE.items()}


class OpKind(str, Enum):
    LINEAR_TANH = "LinearTanh"
    SKIP = "Skip"
    ZERO = "Zero"
    NOISE = "Noise"
    AVG_PAIR = "AvgPair"

    def __str__(self) -> str:
        return self.value

    @property
    def has_params(self) -> bool:
        return self is OpKind.LINEAR_TANH


@dataclass(frozen=True)
class CellTopology:
    num_intermediate: int = 1
    width: int = 8
    num_input_nodes: int = 2

    def __post_init__(self):
        if self.num_intermediate < 1:
            raise ValueError("need at least one intermediate node")
        if self.width < 2 or self.width % 2:
            raise ValueError("width must be a positive even number")

    @property
    def edges(self) -> list[tuple[int, int]]:
        """(source, target) pairs, grouped by target node in increasing order."""
        first = self.num_input_nodes
        return [(i, j) for j in range(first, first + self.num_intermediate) for i in range(j)]

    def incoming(self, node: int) -> list[int]:
        return [e for e, (_, j) in enumerate(self.edges) if j == node]

    @property
    def intermediate_nodes(self) -> range:
        return range(self.num_input_nodes, self.num_input_nodes + self.num_intermediate)


@dataclass(frozen=True)
class SpaceSpec:
    name: str
    topology: CellTopology
    candidate_ops: tuple[OpKind, ...]
    cell_types: tuple[str, ...] = CELL_TYPES

    def __post_init__(self):
        if len(self.candidate_ops) < 2:
            raise ValueError("a search space needs at least two candidate ops")
        if len(set(self.candidate_ops)) != len(self.candidate_ops):
            raise ValueError("duplicate candidate ops")

    @property
    def num_edges(self) -> int:
        return len(self.topology.edges)

    @property
    def num_ops(self) -> int:
        return len(self.candidate_ops)

    @property
    def width(self) -> int:
        return self.topology.width

    @property
    def alpha_size(self) -> int:
        return len(self.cell_types) * self.num_edges * self.num_ops

    def op_index(self, op: OpKind) -> int:
        return self.candidate_ops.index(op)


_PRESET_OPS = {
    "T2": (OpKind.LINEAR_TANH, OpKind.SKIP),
    "T3": (OpKind.LINEAR_TANH, OpKind.SKIP, OpKind.ZERO),
    "T4": (OpKind.LINEAR_TANH, OpKind.NOISE),
    "T5": (OpKind.LINEAR_TANH, OpKind.SKIP, OpKind.AVG_PAIR),
}
PRESETS = tuple(_PRESET_OPS)


def get_space(name: str, num_intermediate: int = 1, width: int = 8) -> SpaceSpec:
    """Named preset. T5 is always a single intermediate node."""
    try:
        ops = _PRESET_OPS[name]
    except KeyError:
        raise ValueError(f"unknown space preset {name!r}; choose from {PRESETS}") from None
    if name == "T5":
        num_intermediate = 1
    return SpaceSpec(name, CellTopology(num_intermediate, width), ops)


# -- architecture parameters --------------------------------------------------

ArchParams = dict  # cell type -> ndarray (edges, ops)


def zeros_alpha(space: SpaceSpec) -> ArchParams:
    return {ct: np.zeros((space.num_edges, space.num_ops)) for ct in space.cell_types}


def mixture_weights(alpha: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {ct: ad._softmax(np.asarray(a, dtype=np.float64)) for ct, a in alpha.items()}


def flatten_alpha(alpha: Mapping[str, np.ndarray], space: SpaceSpec) -> np.ndarray:
    return np.concatenate([np.asarray(alpha[ct], dtype=np.float64).ravel()
                           for ct in space.cell_types])


def unflatten_alpha(flat: np.ndarray, space: SpaceSpec) -> ArchParams:
    n = space.num_edges * space.num_ops
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (n * len(space.cell_types),):
        raise ValueError(f"expected {n * len(space.cell_types)} alpha entries, got {flat.shape}")
    return {ct: flat[i * n:(i + 1) * n].reshape(space.num_edges, space.num_ops).copy()
            for i, ct in enumerate(space.cell_types)}


# -- genotypes ----------------------------------------------------------------

@dataclass(frozen=True, order=True)
class Genotype:
    """Discrete architecture: cell type -> ((edge, op), ...) sorted by edge."""

    cells: tuple[tuple[str, tuple[tuple[int, OpKind], ...]], ...] = field(default=())

    @classmethod
    def from_dict(cls, cells: Mapping[str, Mapping[int, OpKind]]) -> "Genotype":
        ordered = sorted(cells.items(), key=lambda kv: CELL_TYPES.index(kv[0]))
        return cls(tuple((ct, tuple(sorted((int(e), OpKind(o)) for e, o in ops.items())))
                         for ct, ops in ordered))

    def cell(self, cell_type: str) -> dict[int, OpKind]:
        for ct, ops in self.cells:
            if ct == cell_type:
                return dict(ops)
        raise KeyError(cell_type)

    def ops(self) -> list[OpKind]:
        return [op for _, ops in self.cells for _, op in ops]

    def count(self, op: OpKind) -> int:
        return sum(1 for o in self.ops() if o is op)

    def __str__(self) -> str:
        return "|".join(
            f"{_CELL_CODE[ct]}:" + ",".join(f"{op.value}@{e}" for e, op in ops)
            for ct, ops in self.cells)

    @classmethod
    def parse(cls, text: str) -> "Genotype":
        cells = {}
        try:
            for part in text.strip().split("|"):
                code, body = part.split(":", 1)
                ops = {}
                for item in filter(None, body.split(",")):
                    op, edge = item.split("@")
                    ops[int(edge)] = OpKind(op)
                cells[_CODE_CELL[code]] = ops
        except (ValueError, KeyError) as err:
            raise ValueError(f"malformed genotype string {text!r}") from err
        return cls.from_dict(cells)


def discretize(alpha: Mapping[str, np.ndarray], space: SpaceSpec, k: int | None = None) -> Genotype:
    """Argmax op per edge, then keep the ``k`` strongest incoming edges per node.

    Edge strength is the softmax weight of its best op.  Ties go to the lower
    edge index, then the lower op index.
    """
    weights = mixture_weights(alpha)
    cells = {}
    for ct in space.cell_types:
        w = weights[ct]
        best = np.argmax(w, axis=1)  # first maximum on ties
        strength = w[np.arange(len(best)), best]
        kept = {}
        for node in space.topology.intermediate_nodes:
            incoming = space.topology.incoming(node)
            kk = len(incoming) if k is None else k
            if not 1 <= kk <= len(incoming):
                raise ValueError(f"k={kk} invalid for node {node} with {len(incoming)} inputs")
            ranked = sorted(incoming, key=lambda e: (-strength[e], e))
            for e in ranked[:kk]:
                kept[e] = space.candidate_ops[best[e]]
        cells[ct] = kept
    return Genotype.from_dict(cells)


def enumerate_space(space: SpaceSpec, k: int | None = None, cap: int = 100_000) -> list[Genotype]:
    """Every distinct genotype, in a fixed lexicographic order."""
    per_node = []
    size_per_cell = 1
    for node in space.topology.intermediate_nodes:
        incoming = space.topology.incoming(node)
        kk = len(incoming) if k is None else k
        if not 1 <= kk <= len(incoming):
            raise ValueError(f"k={kk} invalid for node {node}")
        subsets = list(itertools.combinations(incoming, kk))
        per_node.append(subsets)
        size_per_cell *= len(subsets) * space.num_ops ** kk
    total = size_per_cell ** len(space.cell_types)
    if total > cap:
        raise ValueError(f"space has {total} genotypes, above cap {cap}")

    def cell_choices():
        for edge_sets in itertools.product(*per_node):
            edges = [e for s in edge_sets for e in s]
            for ops in itertools.product(space.candidate_ops, repeat=len(edges)):
                yield dict(zip(edges, ops))

    choices = list(cell_choices())
    return [Genotype.from_dict(dict(zip(space.cell_types, combo)))
            for combo in itertools.product(choices, repeat=len(space.cell_types))]


def saturated_alpha(genotype: Genotype, space: SpaceSpec, value: float = 20.0) -> ArchParams:
    """α that puts (numerically) all mixture mass on the genotype's ops."""
    alpha = {ct: np.full((space.num_edges, space.num_ops), -value) for ct in space.cell_types}
    for ct in space.cell_types:
        for e, op in genotype.cell(ct).items():
            alpha[ct][e, space.op_index(op)] = value
    return alpha


# -- weights and forward passes -----------------------------------------------

def init_weights(space: SpaceSpec, rng: np.random.Generator, in_dim: int = 2,
                 num_classes: int = 2) -> dict[str, np.ndarray]:
    """Scaled-uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer."""
    width = space.width

    def linear(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return (rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                rng.uniform(-bound, bound, size=fan_out))

    w = {}
    w["stem.W"], w["stem.b"] = linear(in_dim, width)
    if OpKind.LINEAR_TANH in space.candidate_ops:
        for ct in space.cell_types:
            for e in range(space.num_edges):
                w[f"{ct}.e{e}.W"], w[f"{ct}.e{e}.b"] = linear(width, width)
    w["head.W"], w["head.b"] = linear(width, num_classes)
    return w


def _avg_pair_matrix(width: int) -> np.ndarray:
    p = np.zeros((width, width))
    for j in range(width):
        p[j, j] += 0.5
        p[(j + 1) % width, j] += 0.5
    return p


_AVG_CACHE: dict[int, Tensor] = {}


def apply_op(op: OpKind, x: Tensor, params: tuple[Tensor, Tensor] | None,
             rng: np.random.Generator | None) -> Tensor | None:
    """Output of one candidate op; ``None`` stands for an all-zero output."""
    if op is OpKind.SKIP:
        return x
    if op is OpKind.ZERO:
        return None
    if op is OpKind.LINEAR_TANH:
        if params is None:
            raise ValueError("LinearTanh op has no weights")
        W, b = params
        return ad.tanh(ad.add(ad.matmul(x, W), b))
    if op is OpKind.AVG_PAIR:
        width = x.shape[-1]
        if width not in _AVG_CACHE:
            _AVG_CACHE[width] = Tensor(_avg_pair_matrix(width))
        return ad.matmul(x, _AVG_CACHE[width])
    if op is OpKind.NOISE:
        if rng is None:
            raise ValueError("Noise op needs a random stream")
        return Tensor(rng.standard_normal(x.shape))
    raise ValueError(f"unhandled op {op}")


def _drop(out: Tensor, op: OpKind, drop_prob: float, rng) -> Tensor:
    # Skip is exempt from drop-path
    if drop_prob <= 0.0 or op is OpKind.SKIP:
        return out
    n, width = out.shape
    keep = (rng.random(n) >= drop_prob) / (1.0 - drop_prob)
    return ad.mask(out, np.repeat(keep[:, None], width, axis=1))


def mixed_edge_forward(x: Tensor, alpha_row: Tensor, ops: tuple[OpKind, ...],
                       params: tuple[Tensor, Tensor] | None,
                       rng: np.random.Generator | None = None,
                       drop_prob: float = 0.0, *, probs: Tensor | None = None) -> Tensor:
    """Σ_o softmax(α)_o · o(x) for one edge.

    ``probs`` passes an already softmaxed row (cell_forward computes one
    softmax per cell); ``alpha_row`` is then ignored.
    """
    if probs is None:
        if alpha_row.shape != (len(ops),):
            raise ad.ShapeError(f"alpha row {alpha_row.shape} vs {len(ops)} ops")
        probs = ad.softmax(alpha_row)
    weights = probs
    total = None
    for o, op in enumerate(ops):
        out = apply_op(op, x, params, rng)
        if out is None:
            continue
        if out.shape != x.shape:
            raise ad.ShapeError(f"{op} output {out.shape} vs input {x.shape}")
        out = _drop(out, op, drop_prob, rng)
        term = ad.mul(ad.slice_(weights, o), out)
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = Tensor(np.zeros(x.shape))
    return total


def _edge_params(weights, ct, e):
    key = f"{ct}.e{e}.W"
    if key not in weights:
        return None
    return weights[key], weights[f"{ct}.e{e}.b"]


def cell_forward(s0: Tensor, s1: Tensor, space: SpaceSpec, cell_type: str,
                 weights: Mapping[str, Tensor], *, alpha: Tensor | None = None,
                 genotype: Genotype | None = None, rng=None, drop_prob: float = 0.0) -> Tensor:
    """Intermediate nodes sum their edge outputs; the cell emits their mean."""
    width = space.width
    for s in (s0, s1):
        if s.shape[-1] != width:
            raise ad.ShapeError(f"cell input width {s.shape[-1]} != {width}")
    chosen = genotype.cell(cell_type) if genotype is not None else None
    nodes = [s0, s1]
    edges = space.topology.edges
    probs = None
    if chosen is None:
        if alpha.shape != (space.num_edges, space.num_ops):
            raise ad.ShapeError(f"alpha {alpha.shape} vs ({space.num_edges}, {space.num_ops})")
        probs = ad.softmax(alpha)
    for node in space.topology.intermediate_nodes:
        acc = None
        for e in space.topology.incoming(node):
            src = nodes[edges[e][0]]
            if chosen is None:
                out = mixed_edge_forward(src, None, space.candidate_ops,
                                         _edge_params(weights, cell_type, e), rng, drop_prob,
                                         probs=ad.slice_(probs, e))
            else:
                if e not in chosen:
                    continue
                op = chosen[e]
                out = apply_op(op, src, _edge_params(weights, cell_type, e), rng)
                if out is None:
                    continue
                out = _drop(out, op, drop_prob, rng)
            acc = out if acc is None else ad.add(acc, out)
        nodes.append(acc if acc is not None else Tensor(np.zeros(s0.shape)))
    inter = nodes[space.topology.num_input_nodes:]
    total = inter[0]
    for t in inter[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(inter)) if len(inter) > 1 else total


def network_forward(x, space: SpaceSpec, weights: Mapping[str, Tensor], *,
                    alpha: Mapping[str, Tensor] | None = None,
                    genotype: Genotype | None = None,
                    rng: np.random.Generator | None = None,
                    drop_prob: float = 0.0,
                    feature_mask: np.ndarray | None = None) -> Tensor:
    """Stem -> normal cell -> reduction cell -> head.

    Search mode (``alpha`` given) mixes every candidate op; eval mode
    (``genotype`` given) runs only the chosen ops.
    """
    if (alpha is None) == (genotype is None):
        raise ValueError("pass exactly one of alpha (search mode) or genotype (eval mode)")
    for key in ("stem.W", "stem.b", "head.W", "head.b"):
        if key not in weights:
            raise ValueError(f"network weights not initialized: missing {key}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    stem = ad.add(ad.matmul(x, weights["stem.W"]), weights["stem.b"])
    if feature_mask is not None:
        stem = ad.mask(stem, feature_mask)
    prev, cur = stem, stem
    for ct in space.cell_types:
        a = alpha[ct] if alpha is not None else None
        out = cell_forward(prev, cur, space, ct, weights, alpha=a, genotype=genotype,
                           rng=rng, drop_prob=drop_prob)
        prev, cur = cur, out
    return ad.add(ad.matmul(cur, weights["head.W"]), weights["head.b"])
