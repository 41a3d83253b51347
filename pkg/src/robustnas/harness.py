"""Experiment orchestration: configs, oracle tables, metrics, runs, sweeps and
reports.  Everything written to disk is CSV or JSON."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bilevel import EvalProtocol, SearchConfig, SearchState, evaluate, train_genotype
from .datagen import DataConfig, Dataset, Split, make_dataset
from .robustify import (AdaConfig, SearchResult, darts_ada, darts_es, hessian_eig_hook,
                        random_search_ws, robust_darts, run_darts)
from .search_space import Genotype, SpaceSpec, discretize, enumerate_space, get_space

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STRATEGIES = ("darts", "darts_es", "darts_ada", "r_darts", "rs_ws")
OUT_ENV = "ROBUSTNAS_OUT"


# -- configuration ------------------------------------------------------------

@dataclass
class ExperimentConfig:
    space: str = "T5"
    num_intermediate: int = 1
    width: int = 8
    k: int | None = None  # retained edges per node; None keeps all
    data: DataConfig = field(default_factory=DataConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    strategy: str = "darts"
    l2_values: list[float] = field(default_factory=list)
    drop_path_values: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None
    oracle: str | None = None
    spectrum: bool = False
    eig_batch_size: int | None = None  # None uses the search batch size
    es_k: int = 5
    es_threshold: float = 0.75
    ada: AdaConfig = field(default_factory=AdaConfig)
    r_darts_kind: str = "L2"
    r_darts_values: list[float] | None = None
    retrain_epochs: int = 25
    rs_ws_samples: int | None = None
    oracle_seeds: list[int] = field(default_factory=lambda: [0, 1])
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")

    def space_spec(self) -> SpaceSpec:
        return get_space(self.space, self.num_intermediate, self.width)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version}")
        nested = {"data": DataConfig, "search": SearchConfig, "protocol": EvalProtocol,
                  "ada": AdaConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# Desk data per space. T4's Noise failure needs a train split small enough for
# the shared weights to overfit; T5 drifts towards parameter-free ops only once
# the supernet fits the wider spiral, which takes more points.
DESK_DATA = {
    "T4": DataConfig(n_train=75, n_valid=400, n_test=2000, label_noise=0.10, radius=1.5),
    "T5": DataConfig(n_train=100, n_valid=400, n_test=2000, label_noise=0.10, radius=3.0),
}


def desk_config(space: str = "T5", **overrides) -> ExperimentConfig:
    """The desk-scale regime used by the experiments and the acceptance suite.

    The R-DARTS selection retrain runs the full protocol length because the toy
    network needs about 500 steps to leave its near-linear plateau; shorter
    retrains score every candidate alike.
    """
    cfg = ExperimentConfig(
        space=space,
        data=DESK_DATA.get(space, DESK_DATA["T5"]),
        search=SearchConfig(epochs=50, batch_size=8, w_lr=0.1, alpha_lr=1e-3),
        protocol=EvalProtocol(epochs=100, batch_size=16, lr=0.1, input_mask_frac=0.125),
        eig_batch_size=64,
        retrain_epochs=100,
    )
    for key, value in overrides.items():
        if key in ("data", "search", "protocol", "ada") and isinstance(value, dict):
            value = dataclasses.replace(getattr(cfg, key), **value)
        setattr(cfg, key, value)
    cfg.__post_init__()
    return cfg


# -- oracle tables ------------------------------------------------------------

@dataclass
class OracleRow:
    genotype: str
    valid_error: float
    test_error: float
    valid_errors: list[float]
    test_errors: list[float]


@dataclass
class OracleTable:
    rows: list[OracleRow]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {r.genotype: r for r in self.rows}
        if len(self._index) != len(self.rows):
            raise ValueError("duplicate genotype rows in oracle table")
        for r in self.rows:
            if not (0.0 <= r.test_error <= 1.0 and 0.0 <= r.valid_error <= 1.0):
                raise ValueError(f"error outside [0, 1] for {r.genotype}")

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, genotype) -> bool:
        return str(genotype) in self._index

    def row(self, genotype) -> OracleRow:
        try:
            return self._index[str(genotype)]
        except KeyError:
            raise KeyError(f"genotype {genotype} not in oracle table") from None

    def best(self) -> OracleRow:
        """Global optimum: min mean test error, ties broken by genotype string."""
        return min(self.rows, key=lambda r: (r.test_error, r.genotype))

    def min_test_error(self) -> float:
        return self.best().test_error

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["genotype", "valid_error", "test_error", "valid_errors", "test_errors"])
            for r in self.rows:
                w.writerow([r.genotype, repr(r.valid_error), repr(r.test_error),
                            ";".join(map(repr, r.valid_errors)), ";".join(map(repr, r.test_errors))])
        with open(path.with_suffix(".meta.json"), "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path, space: SpaceSpec | None = None, k: int | None = None) -> "OracleTable":
        path = Path(path)
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(OracleRow(rec["genotype"], float(rec["valid_error"]),
                                      float(rec["test_error"]),
                                      [float(x) for x in rec["valid_errors"].split(";") if x],
                                      [float(x) for x in rec["test_errors"].split(";") if x]))
        meta_path = path.with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        table = cls(rows, meta)
        if space is not None:
            missing = [str(g) for g in enumerate_space(space, k) if str(g) not in table]
            if missing:
                raise ValueError(f"oracle table {path} misses {len(missing)} genotypes, "
                                 f"e.g. {missing[0]}")
        return table


def _merged(data: Dataset) -> Dataset:
    train = Split(np.concatenate([data.train.X, data.valid.X]),
                  np.concatenate([data.train.y, data.valid.y]))
    return Dataset(train, data.valid, data.test, data.generator, data.seed, data.label_noise)


def evaluate_genotype(genotype: Genotype, space: SpaceSpec, data: Dataset,
                      protocol: EvalProtocol, seed: int) -> tuple[float, float]:
    """(valid error, test error) under the fixed evaluation protocol.

    Valid error: trained on the train split, scored on valid (selection run).
    Test error: retrained on train ∪ valid, scored on test (final evaluation).
    """
    valid = train_genotype(genotype, space, data, protocol, seed)["valid_error"]
    test = train_genotype(genotype, space, _merged(data), protocol, seed)["test_error"]
    return valid, test


def _oracle_row(args) -> OracleRow:
    genotype, space, data, protocol, seeds = args
    pairs = [evaluate_genotype(genotype, space, data, protocol, s) for s in seeds]
    v = [p[0] for p in pairs]
    t = [p[1] for p in pairs]
    return OracleRow(str(genotype), float(np.mean(v)), float(np.mean(t)), v, t)


def build_oracle(space: SpaceSpec, data: Dataset, protocol: EvalProtocol,
                 seeds: Sequence[int] = (0, 1), k: int | None = None, jobs: int = 1) -> OracleTable:
    """Train every genotype of a finite space from scratch for each seed."""
    genotypes = enumerate_space(space, k)
    tasks = [(g, space, data, protocol, list(seeds)) for g in genotypes]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_oracle_row, tasks))
    else:
        rows = [_oracle_row(t) for t in tasks]
    meta = {"space": space.name, "num_genotypes": len(rows), "seeds": list(seeds),
            "protocol": dataclasses.asdict(protocol), "k": k,
            "data": {"generator": data.generator, "seed": data.seed,
                     "label_noise": data.label_noise,
                     "sizes": [len(data.train), len(data.valid), len(data.test)]}}
    return OracleTable(rows, meta)


# -- metrics ------------------------------------------------------------------

def test_regret(genotype, table: OracleTable) -> float:
    """Test error minus the table's minimum test error."""
    return table.row(genotype).test_error - table.min_test_error()


def discretization_drop(state: SearchState, data: Dataset, k: int | None = None,
                        draws: int = 0) -> dict:
    """Validation accuracy/loss of the search model with mixture α versus the
    discretized genotype, both at the same shared weights."""
    space = state.space
    genotype = discretize(state.alpha, space, k)
    loss_mix, acc_mix = evaluate(space, state.weights, data.valid, alpha=state.alpha, draws=draws)
    loss_disc, acc_disc = evaluate(space, state.weights, data.valid, genotype=genotype, draws=draws)
    return {"genotype": str(genotype), "acc_mixture": acc_mix, "acc_discrete": acc_disc,
            "drop": acc_mix - acc_disc, "loss_mixture": loss_mix, "loss_discrete": loss_disc,
            "loss_drop": loss_disc - loss_mix}


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ValueError("pearson needs two equal-length sequences of at least 3 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson undefined for zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


# -- single runs --------------------------------------------------------------

TRACE_COLUMNS = ["epoch", "train_loss", "valid_loss", "valid_acc", "lambda_max", "drop_path_p",
                 "l2", "stop_flag", "genotype", "test_regret"]


def _resolve_out(out: str | None) -> Path:
    root = out or os.environ.get(OUT_ENV)
    if not root:
        raise ValueError(f"no output directory: pass --out or set {OUT_ENV}")
    return Path(root)


def _ensure_writable(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise OSError(f"output directory {path} is not writable: {err}") from err


def execute_strategy(cfg: ExperimentConfig, space: SpaceSpec, data: Dataset) -> SearchResult:
    hook = hessian_eig_hook(spectrum=cfg.spectrum, batch_size=cfg.eig_batch_size)
    s = cfg.strategy
    if s == "darts":
        return run_darts(space, cfg.search, data, eig_hook=hook, k=cfg.k)
    if s == "darts_es":
        return darts_es(space, cfg.search, data, k_avg=cfg.es_k, threshold=cfg.es_threshold,
                        eig_hook=hook, k=cfg.k)
    if s == "darts_ada":
        return darts_ada(space, cfg.search, data, cfg.ada, eig_hook=hook, k=cfg.k)
    if s == "r_darts":
        return robust_darts(space, cfg.search, data, cfg.r_darts_values, cfg.r_darts_kind,
                            retrain_epochs=cfg.retrain_epochs, eig_hook=hook, k=cfg.k,
                            protocol=cfg.protocol)
    if s == "rs_ws":
        return random_search_ws(space, cfg.search, data, cfg.rs_ws_samples, cfg.k)
    raise ValueError(f"unknown strategy {s!r}")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None,
        oracle: OracleTable | None = None) -> Path:
    """Execute one search and write config.json, trace.csv, result.json
    (+ spectrum.csv, timing.json) into the run directory."""
    run_dir = Path(out_dir) if out_dir is not None else _resolve_out(cfg.out)
    _ensure_writable(run_dir)
    space = cfg.space_spec()
    if oracle is None and cfg.oracle:
        oracle = OracleTable.load(cfg.oracle, space, cfg.k)
    (run_dir / "config.json").write_text(cfg.to_json())

    t0 = time.perf_counter()
    data = make_dataset(cfg.data)
    result = execute_strategy(cfg, space, data)
    state = result.state

    result_doc = {
        "strategy": cfg.strategy, "space": cfg.space, "seed": cfg.search.seed,
        "genotype": str(result.genotype), "stop_epoch": result.stop_epoch,
        "final_lambda_max": result.lambda_max,
        "l2": cfg.search.l2_factor, "drop_path_max": cfg.search.drop_path_max,
        "segments": [list(s) for s in result.segments],
        "extras": _jsonable(result.extras),
    }
    regrets = []
    rows = []
    if state is not None:
        result_doc["discretization_drop"] = discretization_drop(state, data, cfg.k)
        for i, h in enumerate(state.history):
            epoch = i + 1
            g = discretize(state.snapshots[epoch].alpha, space, cfg.k)
            reg = test_regret(g, oracle) if oracle is not None else None
            if reg is not None:
                regrets.append(reg)
            lam = state.eig_trace[i].lambda_max if i < len(state.eig_trace) else None
            stop = 1 if result.stop_epoch == epoch else 0
            rows.append([epoch, h.train_loss, h.valid_loss, h.valid_acc, lam, h.drop_path_p,
                         h.l2, stop, str(g), reg])
    if oracle is not None:
        result_doc["test_error"] = oracle.row(result.genotype).test_error
        result_doc["test_regret"] = test_regret(result.genotype, oracle)
        if regrets:
            result_doc["min_regret_over_epochs"] = min(regrets)
            result_doc["final_epoch_regret"] = regrets[-1]

    with open(run_dir / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    if cfg.spectrum and state is not None:
        with open(run_dir / "spectrum.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "index", "eigenvalue"])
            for entry in state.eig_trace:
                for j, val in enumerate(entry.spectrum or ()):
                    w.writerow([entry.epoch, j, repr(val)])
    (run_dir / "result.json").write_text(json.dumps(result_doc, indent=2, sort_keys=True))
    (run_dir / "timing.json").write_text(json.dumps(
        {"wall_time": time.perf_counter() - t0, "search_time": result.wall_time}, indent=2))
    return run_dir


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def rerun(run_dir: str | Path, out_dir: str | Path) -> Path:
    """Re-execute a run from its own config.json."""
    cfg = ExperimentConfig.load(Path(run_dir) / "config.json")
    return run(cfg, out_dir)


# -- sweeps and reports -------------------------------------------------------

def sweep_configs(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """One child config per (regularization value, seed)."""
    axes = [("l2", v) for v in cfg.l2_values] + [("dp", v) for v in cfg.drop_path_values]
    if not axes:
        axes = [("l2", cfg.search.l2_factor)]
    children = []
    for kind, value in axes:
        for seed in cfg.seeds:
            search = (dataclasses.replace(cfg.search, l2_factor=value, seed=seed) if kind == "l2"
                      else dataclasses.replace(cfg.search, drop_path_max=value, seed=seed))
            child = dataclasses.replace(cfg, search=search, l2_values=[], drop_path_values=[],
                                        seeds=[seed], out=None)
            children.append((f"{kind}_{value:g}_s{seed}", child))
    return children


def _run_child(args) -> str:
    name, child, root, oracle_path = args
    oracle = OracleTable.load(oracle_path) if oracle_path else None
    return str(run(child, Path(root) / name, oracle))


def sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None, jobs: int = 1) -> Path:
    root = Path(out_dir) if out_dir is not None else _resolve_out(cfg.out)
    _ensure_writable(root)
    (root / "sweep_config.json").write_text(cfg.to_json())
    tasks = [(name, child, str(root), cfg.oracle) for name, child in sweep_configs(cfg)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            dirs = list(pool.map(_run_child, tasks))
    else:
        dirs = [_run_child(t) for t in tasks]
    report(dirs, root)
    return root


SUMMARY_COLUMNS = ["run", "strategy", "space", "seed", "l2", "drop_path_max", "genotype",
                   "test_regret", "final_lambda_max", "stop_epoch", "discretization_drop"]


def report(run_dirs: Iterable[str | Path], out_dir: str | Path) -> dict:
    """summary.csv (one row per completed run) plus correlation.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, missing = [], []
    for d in map(Path, run_dirs):
        res_path = d / "result.json"
        if not res_path.exists() or not (d / "trace.csv").exists():
            missing.append(str(d))
            continue
        res = json.loads(res_path.read_text())
        drop = res.get("discretization_drop") or {}
        rows.append({"run": d.name, "strategy": res["strategy"], "space": res["space"],
                     "seed": res["seed"], "l2": res["l2"], "drop_path_max": res["drop_path_max"],
                     "genotype": res["genotype"], "test_regret": res.get("test_regret"),
                     "final_lambda_max": res.get("final_lambda_max"),
                     "stop_epoch": res.get("stop_epoch"), "discretization_drop": drop.get("drop")})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SUMMARY_COLUMNS])
    stats: dict = {"num_runs": len(rows), "missing": missing}
    pairs = [(r["final_lambda_max"], r["test_regret"]) for r in rows
             if r["final_lambda_max"] is not None and r["test_regret"] is not None]
    if len(pairs) >= 3:
        try:
            stats["pearson_lambda_regret"] = pearson(*zip(*pairs))
        except ValueError as err:
            stats["pearson_lambda_regret"] = None
            stats["pearson_error"] = str(err)
        stats["pearson_n"] = len(pairs)
    by_l2: dict = {}
    for r in rows:
        if r["final_lambda_max"] is not None:
            by_l2.setdefault(r["l2"], []).append(r)
    stats["by_l2"] = {
        repr(k): {"n": len(v),
                  "mean_lambda_max": float(np.mean([r["final_lambda_max"] for r in v])),
                  "mean_test_regret": (float(np.mean([r["test_regret"] for r in v]))
                                       if all(r["test_regret"] is not None for r in v) else None)}
        for k, v in sorted(by_l2.items())}
    (out / "correlation.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    return stats
