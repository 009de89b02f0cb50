"""Synthetic tasks and CSV ingestion."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParseError
from .network import Model, predict

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise ContractError(f"{self.labels.shape[0]} labels for {n} rows")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError(f"labels must lie in [0, {self.n_classes})")
        idx = np.concatenate([self.train, self.val, self.test])
        if idx.size != n or not np.array_equal(np.sort(idx), np.arange(n)):
            raise ContractError("splits must be disjoint and cover every row")

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = getattr(self, name)
        return self.features[idx], self.labels[idx]


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded 70/15/15 permutation split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def gen_mixture_task(n: int, d: int, n_classes: int, difficulty: float, seed: int) -> Dataset:
    """Balanced Gaussian mixture with one unit-variance cluster per class.

    Centroids sit at radius ``4·(1 − difficulty)`` along random orthonormal
    directions (random unit directions when ``n_classes > d``), so every pair
    of centroids is ``4·√2·(1 − difficulty)`` apart. ``difficulty=0`` is well
    separated; ``difficulty=1`` puts every class on the origin.
    """
    if n_classes < 2 or d < 1:
        raise ContractError("need n_classes >= 2 and d >= 1")
    if n < 10 * n_classes:
        raise ContractError(f"n={n} is below 10 samples per class")
    if not 0.0 <= difficulty <= 1.0:
        raise ContractError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = np.random.default_rng(seed)
    if n_classes <= d:
        q, _ = np.linalg.qr(rng.normal(size=(d, n_classes)))
        dirs = q.T
    else:
        dirs = rng.normal(size=(n_classes, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centroids = 4.0 * (1.0 - difficulty) * dirs
    labels = rng.permutation(np.arange(n) % n_classes)
    x = centroids[labels] + rng.normal(size=(n, d))
    return Dataset(x, labels, *split_indices(n, seed), n_classes=n_classes)


PERTURB_KINDS = ("spectral", "random")


def perturbation(base: Model, layer: int, rank: int, magnitude: float, seed: int,
                 kind: str = "random") -> np.ndarray:
    """Rank-``rank`` delta for one layer of ``base``.

    ``spectral`` rescales the top ``rank`` singular values of the layer weight
    by ``1 - magnitude`` (so 0 leaves it alone and 1 deletes those
    directions). ``random`` draws a Gaussian rank-``rank`` matrix with
    Frobenius norm ``magnitude·‖W‖_F``.
    """
    w = base.layers[layer].weight
    if kind == "spectral":
        u, s, vt = np.linalg.svd(w, full_matrices=False)
        return -magnitude * (u[:, :rank] * s[:rank]) @ vt[:rank]
    if kind == "random":
        rng = np.random.default_rng(seed)
        d = rng.normal(size=(w.shape[0], rank)) @ rng.normal(size=(rank, w.shape[1]))
        return d * (magnitude * np.linalg.norm(w) / np.linalg.norm(d))
    raise ContractError(f"unknown perturbation kind {kind!r}; expected one of {PERTURB_KINDS}")


def gen_layer_concentrated_task(base: Model, perturbed_layer: int, perturb_rank: int, n: int, seed: int,
                                magnitude: float = 1.0, kind: str = "random") -> Dataset:
    """Teacher-labelled task whose only difference from ``base`` is one layer.

    The teacher is ``base`` with a low-rank delta added to ``perturbed_layer``;
    labels are the teacher's argmax on seeded standard-normal inputs.
    """
    if not 0 <= perturbed_layer < base.n_layers:
        raise ContractError(f"perturbed_layer {perturbed_layer} out of range [0, {base.n_layers})")
    w = base.layers[perturbed_layer].weight
    if not 1 <= perturb_rank <= min(w.shape):
        raise ContractError(f"perturb_rank {perturb_rank} outside [1, {min(w.shape)}]")
    if n < 1:
        raise ContractError("n must be positive")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, base.layers[0].d_in))
    teacher = base.copy()
    teacher.adapters = None
    teacher.bottlenecks = None
    teacher.strategy = "base"
    teacher.layers[perturbed_layer].weight = w + perturbation(base, perturbed_layer, perturb_rank, magnitude, seed + 1, kind)
    labels = predict(teacher, x)
    return Dataset(x, labels, *split_indices(n, seed), n_classes=base.n_classes)


def write_csv_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.n_features)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv_dataset(path: str | os.PathLike, n_classes: int, seed: int = 0) -> Dataset:
    """Read ``f0..f{d-1},label`` rows. Errors carry the 1-based line number."""
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ParseError("empty file: a header row is required", 1)
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header[-1] != "label" or header[:-1] != [f"f{j}" for j in range(d)]:
        raise ParseError(f"header must be f0..f{{d-1}},label; got {','.join(header)}", 1)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 1:
            raise ParseError(f"expected {d + 1} fields, got {len(row)}", lineno)
        try:
            vals = [float(c) for c in row[:-1]]
        except ValueError:
            raise ParseError("non-numeric feature value", lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite feature value", lineno)
        try:
            label = int(row[-1])
        except ValueError:
            raise ParseError(f"label {row[-1]!r} is not an integer", lineno) from None
        if not 0 <= label < n_classes:
            raise ParseError(f"label {label} outside [0, {n_classes})", lineno)
        feats.append(vals)
        labels.append(label)
    if not feats:
        raise ParseError("no data rows", len(rows))
    x = np.array(feats, dtype=np.float64)
    return Dataset(x, np.array(labels, dtype=np.int64), *split_indices(len(feats), seed), n_classes=n_classes)
