"""Feature / prediction / neighbor-index memory banks over the target set.

Public functions speak dataset indices. Internally the banks are stored by
*slot*: with ``fraction=1`` slot ``s`` is dataset index ``s``; with a smaller
fraction only a fixed seeded subset of indices is kept and ``slot_of`` maps
dataset index -> slot (or -1 when the sample is not stored).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError, ModelParams, l2_normalize_rows, model_forward


@dataclass
class Banks:
    features: np.ndarray  # (m, d), unit rows
    probs: np.ndarray  # (m, C), softmax rows
    neighbors: np.ndarray  # (m, K), dataset indices ordered by descending similarity
    stored: np.ndarray  # (m,) sorted dataset indices
    slot_of: np.ndarray  # (n,) slot of each dataset index, -1 if not stored
    skipped: int = 0
    # neighbor rows computed for non-stored members of the most recent batch
    transient: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, features, probs, neighbors) -> "Banks":
        """Banks holding every index, built from explicit F, P and N."""
        features = np.asarray(features, dtype=np.float64)
        n = len(features)
        return cls(
            features,
            np.asarray(probs, dtype=np.float64),
            np.asarray(neighbors, dtype=np.int64).reshape(n, -1),
            np.arange(n),
            np.arange(n),
        )

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def size(self) -> int:
        return len(self.stored)

    @property
    def n_total(self) -> int:
        return len(self.slot_of)

    def copy(self) -> "Banks":
        return Banks(
            self.features.copy(),
            self.probs.copy(),
            self.neighbors.copy(),
            self.stored.copy(),
            self.slot_of.copy(),
            self.skipped,
            {i: r.copy() for i, r in self.transient.items()},
        )

    def _check_range(self, indices: np.ndarray) -> None:
        if indices.size and (indices.min() < 0 or indices.max() >= self.n_total):
            raise IndexError(f"index outside [0, {self.n_total})")

    def slots(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        self._check_range(indices)
        slots = self.slot_of[indices]
        if np.any(slots < 0):
            missing = indices[slots < 0]
            raise IndexError(f"dataset index {int(missing[0])} is not stored in the banks")
        return slots

    def neighbor_rows(self, indices) -> np.ndarray:
        """K-neighbor rows (dataset indices) for each entry of ``indices``.

        Non-stored indices fall back to the rows computed for them by the
        last :func:`update_banks` call.
        """
        indices = np.asarray(indices, dtype=np.int64)
        self._check_range(indices)
        out = np.empty((len(indices), self.k), dtype=np.int64)
        for pos, idx in enumerate(indices):
            slot = self.slot_of[idx]
            if slot >= 0:
                out[pos] = self.neighbors[slot]
            elif int(idx) in self.transient:
                out[pos] = self.transient[int(idx)]
            else:
                raise IndexError(f"dataset index {int(idx)} has no neighbor row")
        return out

    def prob_rows(self, indices) -> np.ndarray:
        return self.probs[self.slots(indices)]


def _similarities(q: np.ndarray, f: np.ndarray, chunk: int = 256) -> np.ndarray:
    # Elementwise product + row sum rather than a BLAS matmul: identical bank
    # rows must score bitwise-identically or the index tie-break is lost.
    out = np.empty((len(q), len(f)))
    for start in range(0, len(q), chunk):
        out[start : start + chunk] = (q[start : start + chunk, None, :] * f[None, :, :]).sum(axis=2)
    return out


def topk_neighbors(banks: Banks, query_features: np.ndarray, k: int, exclude) -> np.ndarray:
    """Exact top-``k`` stored indices by dot product against the feature bank.

    ``exclude[i]`` is the dataset index of query row ``i``; its stored copy
    (if any) is never returned. Ties go to the smaller index.
    """
    q = np.atleast_2d(np.asarray(query_features, dtype=np.float64))
    exclude = np.asarray(exclude, dtype=np.int64)
    if exclude.shape != (len(q),):
        raise ConfigError("exclude must give one dataset index per query row")
    sims = _similarities(q, banks.features)
    self_slot = np.full(len(q), -1, dtype=np.int64)
    in_range = (exclude >= 0) & (exclude < banks.n_total)
    self_slot[in_range] = banks.slot_of[exclude[in_range]]
    has_self = self_slot >= 0
    available = banks.size - has_self.astype(int)
    if k < 1 or np.any(k > available):
        raise ConfigError(f"k={k} exceeds the {int(available.min())} available candidates")
    rows = np.flatnonzero(has_self)
    sims[rows, self_slot[rows]] = -np.inf
    # stable sort on -sim keeps equal similarities in ascending slot (= index) order
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return banks.stored[order]


def init_banks(
    params: ModelParams, x: np.ndarray, k: int, fraction: float = 1.0, seed: int = 0
) -> Banks:
    """Fill the banks with one forward pass of ``params`` over the target inputs."""
    n = len(x)
    if n == 0:
        raise ConfigError("cannot build banks for an empty dataset")
    if not 0 < fraction <= 1:
        raise ConfigError(f"bank fraction must lie in (0, 1], got {fraction}")
    if fraction < 1:
        m = int(round(n * fraction))
        stored = np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))
    else:
        stored = np.arange(n)
    if k >= len(stored):
        raise ConfigError(f"K={k} must be smaller than the {len(stored)} stored samples")
    slot_of = np.full(n, -1, dtype=np.int64)
    slot_of[stored] = np.arange(len(stored))

    feats, _, probs = model_forward(params, x[stored])
    banks = Banks(
        features=l2_normalize_rows(feats),
        probs=probs,
        neighbors=np.zeros((len(stored), k), dtype=np.int64),
        stored=stored,
        slot_of=slot_of,
    )
    banks.neighbors = topk_neighbors(banks, banks.features, k, stored)
    return banks


def update_banks(banks: Banks, batch_indices, features: np.ndarray, probs: np.ndarray) -> Banks:
    """Write a mini-batch into F and P, then refresh N for that batch only.

    Mutates and returns ``banks``. Batch members outside the stored subset
    are not written; their fresh neighbor rows go to ``banks.transient`` and
    ``banks.skipped`` counts them.
    """
    idx = np.asarray(batch_indices, dtype=np.int64)
    banks._check_range(idx)
    if len(features) != len(idx) or len(probs) != len(idx):
        raise ConfigError("features/probs rows must align with batch_indices")
    norms = np.linalg.norm(features, axis=1)
    if np.any(np.abs(norms - 1) > 1e-6):
        raise ConfigError("features must be L2-normalized before updating the banks")

    slots = banks.slot_of[idx]
    kept = slots >= 0
    banks.features[slots[kept]] = features[kept]
    banks.probs[slots[kept]] = probs[kept]

    rows = topk_neighbors(banks, features, banks.k, idx)
    banks.neighbors[slots[kept]] = rows[kept]
    banks.transient = {int(i): r for i, r in zip(idx[~kept], rows[~kept])}
    banks.skipped += int((~kept).sum())
    return banks


def expanded_neighbors(banks: Banks, i: int) -> set[int]:
    """Union of the neighbor rows of ``i``'s neighbors; bank reads only."""
    direct = banks.neighbor_rows([i])[0]
    return set(banks.neighbors[banks.slots(direct)].ravel().tolist())


def neighborhood_purity(banks: Banks, labels) -> float:
    """Fraction of stored (anchor, neighbor) pairs that share a label."""
    labels = np.asarray(labels)
    anchor = labels[banks.stored][:, None]
    return float(np.mean(labels[banks.neighbors] == anchor))


def dump_banks(banks: Banks, directory) -> list[Path]:
    """Write F, P and N to ``features.csv``, ``probs.csv``, ``neighbors.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, arr, prefix in (
        ("features", banks.features, "f"),
        ("probs", banks.probs, "p"),
        ("neighbors", banks.neighbors, "n"),
    ):
        path = directory / f"{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index"] + [f"{prefix}{j}" for j in range(arr.shape[1])])
            for idx, row in zip(banks.stored, arr):
                w.writerow([int(idx)] + [repr(v) if isinstance(v, float) else v for v in row.tolist()])
        paths.append(path)
    return paths
