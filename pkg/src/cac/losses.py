"""Neighborhood-pair contrastive objectives over softmax outputs.

All dot products are between probability vectors. Bank rows are constants:
gradients are returned w.r.t. the mini-batch probabilities only (except for
:func:`multi_positive_nce`, whose in-batch negatives are live outputs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .banks import Banks
from .core import ConfigError, NumericError

MODES = ("pos_only", "neg_only", "full")


@dataclass(frozen=True)
class DecaySchedule:
    beta: float
    max_iter: int


def decay_factor(iteration: int, schedule: DecaySchedule) -> float:
    """Negative-term weight ``(max_iter / (max_iter + iteration)) ** beta``."""
    if iteration < 0 or schedule.max_iter <= 0:
        raise ConfigError("need iteration >= 0 and max_iter > 0")
    return (schedule.max_iter / (schedule.max_iter + iteration)) ** schedule.beta


@dataclass
class LossBreakdown:
    total: float
    positive_term: float
    negative_term: float
    alpha: float
    grad: np.ndarray  # d total / d batch_probs, (S, C)

    def record(self, step: int) -> dict:
        return {
            "step": step,
            "total": self.total,
            "pos": self.positive_term,
            "neg": self.negative_term,
            "alpha": self.alpha,
        }


def _check_probs(p: np.ndarray) -> None:
    if not np.all(np.isfinite(p)):
        raise NumericError("batch probabilities contain non-finite values")
    if p.ndim != 2 or np.any(np.abs(p.sum(axis=1) - 1) > 1e-6):
        raise ConfigError("batch probability rows must sum to 1 (within 1e-6)")


def build_similarity_mask(batch_indices, banks: Banks) -> np.ndarray:
    """S x S 0/1 matrix; (i, j) is 0 when batch member j is a direct or
    expanded neighbor of member i. The diagonal is always 0."""
    idx = np.asarray(batch_indices, dtype=np.int64)
    s = len(idx)
    direct = banks.neighbor_rows(idx)  # (S, K)
    second = banks.neighbors[banks.slots(direct.ravel())].reshape(s, -1)  # (S, K*K)
    similar = np.concatenate([direct, second], axis=1)
    hit = (similar[:, None, :] == idx[None, :, None]).any(axis=2)
    mask = (~hit).astype(np.int8)
    np.fill_diagonal(mask, 0)
    return mask


def cac_loss(
    batch_probs: np.ndarray,
    batch_indices,
    banks: Banks,
    mask: np.ndarray,
    alpha: float = 1.0,
    mode: str = "full",
) -> LossBreakdown:
    """Neighbor-pair contrast: pull each anchor toward its K neighbors' stored
    predictions, push it away from the stored predictions of the neighbors of
    every unmasked batch member. Terms are averaged over the batch."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    p = np.asarray(batch_probs, dtype=np.float64)
    _check_probs(p)
    s = len(p)
    # sum of the K stored neighbor predictions of each batch member, (S, C)
    nb = banks.probs[banks.slots(banks.neighbor_rows(batch_indices))].sum(axis=1)
    m = np.asarray(mask, dtype=np.float64).copy()
    np.fill_diagonal(m, 0.0)
    neg_pool = m @ nb

    pos = float(np.sum(p * nb)) / s if mode != "neg_only" else 0.0
    neg = float(np.sum(p * neg_pool)) / s if mode != "pos_only" else 0.0
    grad = np.zeros_like(p)
    if mode != "neg_only":
        grad -= nb / s
    if mode != "pos_only":
        grad += alpha * neg_pool / s
    return LossBreakdown(alpha * neg - pos, pos, neg, alpha, grad)


def multi_positive_nce(batch_probs: np.ndarray, batch_indices, banks: Banks) -> tuple[float, np.ndarray]:
    """InfoNCE with the K bank neighbors as positives and the other batch
    members (minus that positive, if it is in the batch) as negatives.

    Returns the batch-mean loss and its gradient w.r.t. ``batch_probs``.
    """
    p = np.asarray(batch_probs, dtype=np.float64)
    _check_probs(p)
    idx = np.asarray(batch_indices, dtype=np.int64)
    s = len(p)
    neigh = banks.neighbor_rows(idx)  # (S, K)
    pos_p = banks.probs[banks.slots(neigh)]  # (S, K, C)
    s_pos = np.einsum("sc,skc->sk", p, pos_p)
    e_pos = np.exp(s_pos)

    e_batch = np.exp(p @ p.T)
    allowed = (neigh[:, :, None] != idx[None, None, :]) & ~np.eye(s, dtype=bool)[:, None, :]
    w = e_batch[:, None, :] * allowed  # (S, K, S)
    denom = w.sum(axis=2) + e_pos
    loss = float(np.sum(np.log(denom) - s_pos)) / s

    coef_pos = e_pos / denom - 1.0
    coef_neg = np.sum(w / denom[:, :, None], axis=1)  # (S, S)
    grad = np.einsum("sk,skc->sc", coef_pos, pos_p) + coef_neg @ p + coef_neg.T @ p
    return loss, grad / s


def _logsumexp(a: np.ndarray) -> float:
    top = np.max(a)
    return float(top + np.log(np.sum(np.exp(a - top))))


def likelihood_ratio_objective(
    batch_probs: np.ndarray, batch_indices, banks: Banks, mask: np.ndarray
) -> float:
    """``-(1/S) sum_i log(P_same(i) / P_dis(i))`` evaluated in log space.

    ``P_same`` is the product over the anchor's K neighbors and ``P_dis`` the
    product over the neighbors of its unmasked batch partners, each factor a
    softmax over every stored sample except the anchor itself.
    """
    p = np.asarray(batch_probs, dtype=np.float64)
    _check_probs(p)
    idx = np.asarray(batch_indices, dtype=np.int64)
    neigh = banks.neighbor_rows(idx)
    total = 0.0
    for i in range(len(p)):
        scores = banks.probs @ p[i]
        own = banks.slot_of[idx[i]]
        others = np.delete(scores, own) if own >= 0 else scores
        lse = _logsumexp(others)
        pos = scores[banks.slots(neigh[i])]
        partners = [b for b in range(len(p)) if b != i and mask[i, b]]
        neg = scores[banks.slots(neigh[partners].ravel())] if partners else np.empty(0)
        log_same = pos.sum() - len(pos) * lse
        log_dis = neg.sum() - len(neg) * lse
        total -= log_same - log_dis
    value = total / len(p)
    if not np.isfinite(value):
        raise NumericError("likelihood-ratio objective is non-finite")
    return value
