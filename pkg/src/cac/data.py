"""Synthetic two-domain Gaussian-blob benchmarks and dataset CSV I/O.

Randomness comes from numpy's PCG64 generator (``np.random.default_rng``)
seeded through a ``SeedSequence``, so datasets are reproducible from the
spec alone. The source and target draws use two spawned child streams.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ConfigError


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    domain: str = "target"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ConfigError(f"X {self.X.shape} and y {self.y.shape} do not align")
        if not np.all(np.isfinite(self.X)):
            raise ConfigError("dataset contains non-finite features")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        if self.domain not in ("source", "target"):
            raise ConfigError(f"domain must be 'source' or 'target', got {self.domain!r}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


def _default_centers() -> list[list[float]]:
    # equilateral triangle of radius 1.25
    r, h = 1.25, 1.25 * 0.8660254037844386
    return [[0.0, r], [-h, -r / 2], [h, -r / 2]]


@dataclass
class DomainShiftSpec:
    num_classes: int = 3
    n_source: int = 300
    n_target: int = 300
    centers: list[list[float]] = field(default_factory=_default_centers)
    cluster_std: float = 0.35
    rotation_degrees: float = 30.0
    translation: list[float] = field(default_factory=lambda: [0.5, 0.0])
    target_proportions: Optional[list[float]] = None
    seed: int = 0

    def validate(self) -> None:
        c = self.num_classes
        if c < 2:
            raise ConfigError("need at least two classes")
        if self.n_source < c or self.n_target < c:
            raise ConfigError("each domain needs at least one sample per class")
        if self.cluster_std <= 0:
            raise ConfigError("cluster_std must be positive")
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.ndim != 2 or len(centers) != c:
            raise ConfigError(f"need {c} centers, got array of shape {centers.shape}")
        if centers.shape[1] < 2:
            raise ConfigError("inputs must be at least two-dimensional")
        if len(self.translation) != centers.shape[1]:
            raise ConfigError("translation length must match the input dimension")
        if self.target_proportions is not None:
            _check_proportions(self.target_proportions, c)


def _check_proportions(proportions, num_classes: int) -> np.ndarray:
    p = np.asarray(proportions, dtype=np.float64)
    if p.shape != (num_classes,):
        raise ConfigError(f"need {num_classes} proportions, got {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError(f"proportions must be nonnegative and sum to 1, got sum {p.sum():.12g}")
    return p


def rounded_counts(n: int, proportions) -> np.ndarray:
    """Class sizes ``round(n * p_c)`` with halves rounded up."""
    return np.floor(n * np.asarray(proportions, dtype=np.float64) + 0.5).astype(np.int64)


def _balanced_counts(n: int, c: int) -> np.ndarray:
    return np.array([n // c + (k < n % c) for k in range(c)], dtype=np.int64)


def _draw_blobs(rng, centers: np.ndarray, std: float, counts: np.ndarray):
    xs, ys = [], []
    for label, (center, count) in enumerate(zip(centers, counts)):
        xs.append(center + std * rng.standard_normal((count, centers.shape[1])))
        ys.append(np.full(count, label, dtype=np.int64))
    x, y = np.concatenate(xs), np.concatenate(ys)
    order = rng.permutation(len(y))
    return x[order], y[order]


def rotate_about_centroid(x: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate in the plane of the first two coordinates around the sample mean."""
    theta = np.deg2rad(degrees)
    rot = np.eye(x.shape[1])
    rot[:2, :2] = [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    centroid = x.mean(axis=0)
    return (x - centroid) @ rot.T + centroid


def generate_two_domain_blobs(spec: DomainShiftSpec) -> tuple[LabeledDataset, LabeledDataset]:
    spec.validate()
    centers = np.asarray(spec.centers, dtype=np.float64)
    c = spec.num_classes
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))

    xs, ys = _draw_blobs(src_rng, centers, spec.cluster_std, _balanced_counts(spec.n_source, c))
    if spec.target_proportions is None:
        tgt_counts = _balanced_counts(spec.n_target, c)
    else:
        tgt_counts = rounded_counts(spec.n_target, spec.target_proportions)
    xt, yt = _draw_blobs(tgt_rng, centers, spec.cluster_std, tgt_counts)
    xt = rotate_about_centroid(xt, spec.rotation_degrees) + np.asarray(spec.translation)
    return LabeledDataset(xs, ys, c, "source"), LabeledDataset(xt, yt, c, "target")


def apply_imbalance(dataset: LabeledDataset, proportions, seed: int = 0) -> LabeledDataset:
    """Resample so class ``c`` holds ``round(n * proportions[c])`` samples.

    Draws without replacement while a class has enough samples, then tops
    up with replacement.
    """
    p = _check_proportions(proportions, dataset.num_classes)
    rng = np.random.default_rng(seed)
    picked = []
    for label, want in enumerate(rounded_counts(len(dataset), p)):
        pool = np.flatnonzero(dataset.y == label)
        if want == 0:
            continue
        if pool.size == 0:
            raise ConfigError(f"class {label} is empty and cannot be resampled")
        take = rng.choice(pool, size=min(want, pool.size), replace=False)
        if want > pool.size:
            take = np.concatenate([take, rng.choice(pool, size=want - pool.size, replace=True)])
        picked.append(take)
    order = rng.permutation(np.concatenate(picked))
    return LabeledDataset(dataset.X[order], dataset.y[order], dataset.num_classes, dataset.domain)


def write_dataset_csv(dataset: LabeledDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dataset.input_dim)] + ["label"])
        for row, label in zip(dataset.X.tolist(), dataset.y.tolist()):
            w.writerow([repr(v) for v in row] + [label])


def read_dataset_csv(path, num_classes: int | None = None, domain: str = "target") -> LabeledDataset:
    """Parse a ``x0,...,x{d-1},label`` file. ``num_classes`` defaults to
    ``max(label) + 1``."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label" or header[:-1] != [f"x{j}" for j in range(len(header) - 1)]:
            raise ConfigError(f"{path}: line 1: expected header x0,...,x{{d-1}},label, got {header}")
        d = len(header) - 1
        if d == 0:
            raise ConfigError(f"{path}: line 1: no feature columns")
        xs, ys = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ConfigError(f"{path}: line {line_no}: expected {d + 1} fields, got {len(row)}")
            try:
                xs.append([float(v) for v in row[:-1]])
            except ValueError as exc:
                raise ConfigError(f"{path}: line {line_no}: bad feature value ({exc})") from None
            try:
                ys.append(int(row[-1]))
            except ValueError:
                raise ConfigError(f"{path}: line {line_no}: label {row[-1]!r} is not an integer") from None
    x = np.asarray(xs, dtype=np.float64).reshape(-1, d)
    y = np.asarray(ys, dtype=np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 0
    return LabeledDataset(x, y, num_classes, domain)
