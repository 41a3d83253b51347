"""Seeded two-spiral classification data, minibatching and feature masking."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

SPLITS = ("train", "valid", "test")


@dataclass
class Split:
    X: np.ndarray  # (n, 2)
    y: np.ndarray  # (n,) int labels in {0, 1}

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    valid: Split
    test: Split
    generator: str = "spirals"
    seed: int = 0
    label_noise: float = 0.0

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 400
    n_valid: int = 400
    n_test: int = 2000
    noise_std: float = 0.05
    label_noise: float = 0.10
    turns: float = 1.0
    seed: int = 0
    radius: float = 1.0


def _spiral_points(n: int, offset: int, noise_std: float, turns: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # class alternates with the global construction index, so each split is balanced
    idx = np.arange(offset, offset + n)
    labels = (idx % 2).astype(np.int64)
    t = np.sqrt(rng.uniform(0.0, 1.0, size=n)) * 0.9 + 0.1
    angle = 2.0 * np.pi * turns * t + np.pi * labels
    pts = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
    if noise_std > 0:
        pts = pts + noise_std * rng.standard_normal(pts.shape)
    return pts, labels


def make_spirals(n_train: int = 400, n_valid: int = 400, n_test: int = 2000,
                 noise_std: float = 0.05, label_noise: float = 0.10, seed: int = 0,
                 turns: float = 1.0, radius: float = 1.0) -> Dataset:
    """Two interleaved spiral arms of outer radius ``radius``.

    ``label_noise`` flips exactly round(label_noise * n) labels in each of the
    train and valid splits; test labels stay clean.  The geometry and the
    flips draw from separate streams, so the noiseless dataset for a seed has
    the same points as any noisy one.
    """
    if min(n_train, n_valid, n_test) <= 0:
        raise ValueError("split sizes must be positive")
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not 0.0 <= label_noise < 1.0:
        raise ValueError("label_noise must lie in [0, 1)")
    splits = {}
    offset = 0
    for name, n in zip(SPLITS, (n_train, n_valid, n_test)):
        X, y = _spiral_points(n, offset, noise_std, turns, stream(seed, "spirals", name))
        if name != "test" and label_noise > 0:
            flip = stream(seed, "label_noise", name).choice(
                n, size=int(round(label_noise * n)), replace=False)
            y = y.copy()
            y[flip] = 1 - y[flip]
        splits[name] = Split(radius * X, y)
        offset += n
    return Dataset(**splits, generator="spirals", seed=seed, label_noise=label_noise)


def make_dataset(cfg: DataConfig) -> Dataset:
    return make_spirals(cfg.n_train, cfg.n_valid, cfg.n_test, cfg.noise_std,
                        cfg.label_noise, cfg.seed, cfg.turns, cfg.radius)


def minibatches(split: Split, batch_size: int, epoch_seed: int | np.random.Generator) -> list[Split]:
    """One seeded pass over ``split``; the final short batch is kept."""
    n = len(split)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size {batch_size} must be in [1, {n}]")
    rng = epoch_seed if isinstance(epoch_seed, np.random.Generator) else stream(epoch_seed, "batches")
    order = rng.permutation(n)
    return [Split(split.X[order[i:i + batch_size]], split.y[order[i:i + batch_size]])
            for i in range(0, n, batch_size)]


def feature_mask(n: int, width: int, frac: float, rng: np.random.Generator) -> np.ndarray | None:
    """Cutout analogue: zero one contiguous block of ``frac * width`` features per sample."""
    block = int(round(frac * width))
    if block <= 0:
        return None
    block = min(block, width)
    starts = rng.integers(0, width - block + 1, size=n)
    cols = np.arange(width)[None, :]
    return ((cols < starts[:, None]) | (cols >= starts[:, None] + block)).astype(np.float64)


def save_csv(data: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "label", "split"])
        for name in SPLITS:
            s = data.split(name)
            for (x1, x2), label in zip(s.X, s.y):
                w.writerow([repr(float(x1)), repr(float(x2)), int(label), name])


def load_csv(path: str | Path, seed: int = 0, label_noise: float = 0.0) -> Dataset:
    rows = {name: ([], []) for name in SPLITS}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            xs, ys = rows[row["split"]]
            xs.append((float(row["x1"]), float(row["x2"])))
            ys.append(int(row["label"]))
    splits = {name: Split(np.array(xs, dtype=np.float64).reshape(-1, 2), np.array(ys, dtype=np.int64))
              for name, (xs, ys) in rows.items()}
    return Dataset(**splits, generator="csv", seed=seed, label_noise=label_noise)
