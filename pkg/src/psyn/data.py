"""Synthetic datasets, cross-validation splits and block/split sharding.

A training epoch is cut into blocks of ``n_workers * sync_period * minibatch``
samples; each block is dealt contiguously into one split per worker, and each
split is chunked into minibatches.  The last block may be short, in which case
its samples are shared out as evenly as possible and workers see fewer (or
smaller) minibatches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import InputError
from .numkit import DATA_STREAM, SHUFFLE_STREAM, SPLIT_STREAM, Batch, rng

TASKS = ("linreg", "logreg", "mlp-teacher")


@dataclass(frozen=True)
class GeneratorSpec:
    task: str
    n: int
    d: int
    noise: float = 0.0
    cond: float = 1.0
    seed: int = 0
    n_classes: int = 4
    teacher_hidden: int = 16


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray = field(repr=False)
    targets: np.ndarray = field(repr=False)
    spec: GeneratorSpec | None = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.targets, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
            raise InputError("dataset needs an n x d feature matrix and n targets")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InputError("dataset contains non-finite values")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def task(self) -> str:
        return self.spec.task if self.spec else "linreg"

    def batch(self, idx: np.ndarray | None = None) -> Batch:
        if idx is None:
            return Batch(self.features, self.targets)
        return Batch(self.features[idx], self.targets[idx])

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.targets[idx], self.spec)


def _shaped_features(g: np.random.Generator, n: int, d: int, cond: float) -> np.ndarray:
    """n x d matrix whose singular values run geometrically from sqrt(n)*cond to sqrt(n)."""
    k = min(n, d)
    u, _ = np.linalg.qr(g.standard_normal((n, k)))
    v, _ = np.linalg.qr(g.standard_normal((d, k)))
    s = np.sqrt(n) * np.geomspace(cond, 1.0, k) if k > 1 else np.array([np.sqrt(n)])
    # unit-scale features: divide by the rms singular value
    s = s / np.sqrt(np.mean(s**2)) * np.sqrt(n)
    return (u * s) @ v.T


def make_synthetic(task: str, n: int, d: int, noise: float = 0.0, cond: float = 1.0,
                   seed: int = 0, n_classes: int = 4, teacher_hidden: int = 16) -> Dataset:
    """Build a reproducible desk-scale dataset.

    ``linreg`` targets are ``X w* + noise * N(0, 1)``.  ``logreg`` labels are
    Bernoulli draws from ``sigmoid(X w*)`` with a fraction ``noise`` of them
    flipped.  ``mlp-teacher`` labels are the argmax of a fixed random ReLU
    network's logits after adding ``noise * N(0, 1)`` to them.
    """
    if task not in TASKS:
        raise InputError(f"unknown task {task!r}; expected one of {TASKS}")
    if n < 1 or d < 1:
        raise InputError("n and d must be >= 1")
    if noise < 0 or cond < 1:
        raise InputError("need noise >= 0 and cond >= 1")
    spec = GeneratorSpec(task, n, d, float(noise), float(cond), seed, n_classes, teacher_hidden)
    g = rng(seed, DATA_STREAM)
    x = _shaped_features(g, n, d, cond)
    if task == "linreg":
        w = g.standard_normal(d)
        y = x @ w + noise * g.standard_normal(n)
    elif task == "logreg":
        w = g.standard_normal(d) / np.sqrt(d) * 3.0
        p = 1.0 / (1.0 + np.exp(-(x @ w)))
        y = (g.random(n) < p).astype(np.float64)
        flip = g.random(n) < min(noise, 0.5)
        y[flip] = 1.0 - y[flip]
    else:
        if n_classes < 2:
            raise InputError("mlp-teacher needs n_classes >= 2")
        w1 = g.standard_normal((teacher_hidden, d)) / np.sqrt(d)
        b1 = 0.1 * g.standard_normal(teacher_hidden)
        w2 = g.standard_normal((n_classes, teacher_hidden)) / np.sqrt(teacher_hidden)
        logits = np.maximum(x @ w1.T + b1, 0.0) @ w2.T
        logits += noise * g.standard_normal(logits.shape)
        y = np.argmax(logits, axis=1).astype(np.float64)
    return Dataset(x, y, spec)


def cv_split(dataset: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not (0.0 < fraction <= 0.5):
        raise InputError(f"cv fraction must lie in (0, 0.5], got {fraction}")
    n_cv = int(round(fraction * dataset.n))
    if n_cv == 0 or n_cv == dataset.n:
        raise InputError(f"cv fraction {fraction} leaves an empty split for n={dataset.n}")
    perm = rng(seed, SPLIT_STREAM).permutation(dataset.n)
    cv_idx = np.sort(perm[:n_cv])
    train_idx = np.sort(perm[n_cv:])
    return dataset.subset(train_idx), dataset.subset(cv_idx)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return rng(seed, SHUFFLE_STREAM + epoch).permutation(n)


@dataclass(frozen=True)
class Block:
    splits: tuple[np.ndarray, ...]
    short: bool = False


@dataclass(frozen=True)
class ShardedDataset:
    """Block/split view of a dataset for ``n_workers`` workers.

    With ``reshuffle`` off every epoch reuses the epoch-0 permutation.
    """

    dataset: Dataset
    n_workers: int
    sync_period: int
    minibatch: int
    seed: int = 0
    reshuffle: bool = True

    def blocks(self, epoch: int = 0) -> list[Block]:
        perm = epoch_permutation(self.dataset.n, self.seed, epoch if self.reshuffle else 0)
        size = self.n_workers * self.sync_period * self.minibatch
        share = self.sync_period * self.minibatch
        out = []
        for start in range(0, self.dataset.n, size):
            chunk = perm[start:start + size]
            if len(chunk) == size:
                splits = tuple(chunk[i * share:(i + 1) * share] for i in range(self.n_workers))
                out.append(Block(splits))
            else:
                out.append(Block(tuple(np.array_split(chunk, self.n_workers)), short=True))
        return out

    def minibatches(self, split: np.ndarray) -> list[np.ndarray]:
        return [split[i:i + self.minibatch] for i in range(0, len(split), self.minibatch)]

    def stream(self, split: np.ndarray) -> Iterator[Batch]:
        for idx in self.minibatches(split):
            yield self.dataset.batch(idx)


def shard(dataset: Dataset, n_workers: int, sync_period: int, minibatch: int,
          seed: int = 0, reshuffle: bool = True) -> ShardedDataset:
    if n_workers < 1 or sync_period < 1 or minibatch < 1:
        raise InputError("n_workers, sync_period and minibatch must be >= 1")
    if dataset.n < n_workers * minibatch:
        raise InputError(
            f"minibatch {minibatch} larger than the per-worker share "
            f"{dataset.n // n_workers} of {dataset.n} samples"
        )
    return ShardedDataset(dataset, n_workers, sync_period, minibatch, seed, reshuffle)


# ---------------------------------------------------------------------------
# cache file: <3I n, d, task code> then features row-major, then targets, all f64 LE

_TASK_CODES = {t: i for i, t in enumerate(TASKS)}


def dataset_bytes(ds: Dataset) -> bytes:
    head = struct.pack("<3I", ds.n, ds.d, _TASK_CODES[ds.task])
    return head + ds.features.astype("<f8").tobytes() + ds.targets.astype("<f8").tobytes()


def dataset_from_bytes(data: bytes) -> Dataset:
    n, d, code = struct.unpack_from("<3I", data, 0)
    if code >= len(TASKS) or len(data) != 12 + 8 * n * (d + 1):
        raise InputError("malformed dataset cache")
    x = np.frombuffer(data, "<f8", n * d, 12).reshape(n, d).astype(np.float64)
    y = np.frombuffer(data, "<f8", n, 12 + 8 * n * d).astype(np.float64)
    spec = GeneratorSpec(TASKS[code], n, d)
    return Dataset(x, y, spec)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path: str | Path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
