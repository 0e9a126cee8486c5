"""Language-modelling, memory-relevance and memory-diversity objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ContractError, DivergenceError


@dataclass(frozen=True)
class LossReport:
    l_ce: float
    l_sim: float
    l_div: float
    l_total: float
    lambda_sim: float
    lambda_div: float

    def as_row(self) -> dict[str, float]:
        return {"l_ce": self.l_ce, "l_sim": self.l_sim, "l_div": self.l_div, "l_total": self.l_total}


def lm_loss(logits: nm.Tensor, targets, mask=None) -> nm.Tensor:
    """Mean next-token negative log-likelihood.

    Accepts (T, V) logits with (T,) targets or (B, T, V) with (B, T). Each
    sequence is normalised by its own count of unmasked targets, then the
    batch is averaged.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 2:
        logits = nm.reshape(logits, (1,) + logits.shape)
        targets = targets[None]
        mask = None if mask is None else np.asarray(mask)[None]
    b, t, _ = logits.shape
    mask = np.ones((b, t), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ContractError("every sequence needs at least one target position")
    logp = nm.log_softmax(logits, axis=-1)
    bi, ti = np.nonzero(mask)
    picked = logp[bi, ti, targets[bi, ti]]
    weights = 1.0 / (counts[bi] * b)
    return -(picked * nm.Tensor(weights)).sum()


def relevance_loss(q: nm.Tensor, candidate_embeddings: nm.Tensor, p: nm.Tensor, weights=None) -> nm.Tensor:
    """Negative p-weighted cosine between each query and its candidates.

    Shapes: q (M, d), candidates (M, k, d), p (M, k); single-query inputs
    drop the leading axis. ``weights`` (M,) averages over queries (uniform
    by default).
    """
    if q.ndim == 1:
        q = nm.reshape(q, (1, -1))
        candidate_embeddings = nm.reshape(candidate_embeddings, (1,) + candidate_embeddings.shape)
        p = nm.reshape(p, (1, -1))
    m, _, d = candidate_embeddings.shape
    cs = nm.cosine_similarity(nm.reshape(q, (m, 1, d)), candidate_embeddings, axis=-1)
    per_query = (p * cs).sum(axis=-1)
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=np.float64)
    return -(per_query * nm.Tensor(w)).sum()


def diversity_loss(candidate_embeddings: nm.Tensor, weights=None) -> nm.Tensor:
    """Mean pairwise cosine among the candidates of each query.

    ``2 / (k (k - 1))`` times the sum over unordered pairs, i.e. the mean
    off-diagonal entry of the cosine Gram matrix.
    """
    if candidate_embeddings.ndim == 2:
        candidate_embeddings = nm.reshape(candidate_embeddings, (1,) + candidate_embeddings.shape)
    m, k, _ = candidate_embeddings.shape
    if k < 2:
        raise ContractError(f"diversity needs at least two candidates, got {k}")
    unit = nm.l2_normalize(candidate_embeddings, axis=-1, what="candidate embedding")
    gram = nm.matmul(unit, nm.transpose(unit, (0, 2, 1)))  # (m, k, k)
    off = (gram * nm.Tensor(1.0 - np.eye(k))).sum(axis=(1, 2)) * (1.0 / (k * (k - 1)))
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=np.float64)
    return (off * nm.Tensor(w)).sum()


def total_loss(l_ce, l_sim, l_div, lambda_sim: float, lambda_div: float, step: int | None = None):
    """``l_ce + lambda_sim * l_sim + lambda_div * l_div`` (Tensors or floats)."""
    total = l_ce + l_sim * lambda_sim + l_div * lambda_div
    value = total.item() if isinstance(total, nm.Tensor) else float(total)
    if not math.isfinite(value):
        where = "" if step is None else f" at step {step}"
        raise DivergenceError(f"non-finite total loss{where}: {value}", step)
    return total


def report(l_ce, l_sim, l_div, l_total, lambda_sim: float, lambda_div: float) -> LossReport:
    f = lambda x: x.item() if isinstance(x, nm.Tensor) else float(x)  # noqa: E731
    return LossReport(f(l_ce), f(l_sim), f(l_div), f(l_total), lambda_sim, lambda_div)
