"""Two-stage memory retrieval.

Stage 1 scores every bank slot with a product key ``[C[a]; C'[b]]`` without
materialising the N keys: it keeps the top-k rows of ``C`` and of ``C'`` for
each query half and ranks the k*k combined sums. Any pair in the global top-k
must have both halves in their half-wise top-k, so the result is exact.

Stage 2 picks one candidate by Gumbel-softmax over cosine similarities. The
forward value is the hard pick; gradients follow the soft mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, DegenerateEntryError

GUMBEL_CLAMP = 1e-10


@dataclass
class ProductKeySet:
    sub_keys: np.ndarray  # C, (sqrt(N), d/2)
    sub_keys_prime: np.ndarray  # C', (sqrt(N), d/2)
    candidate_count: int

    def __post_init__(self):
        if self.sub_keys.shape != self.sub_keys_prime.shape:
            raise ConfigError(f"sub-key codebooks disagree: {self.sub_keys.shape} vs {self.sub_keys_prime.shape}")
        if not 1 <= self.candidate_count <= self.capacity:
            raise ConfigError(f"candidate count {self.candidate_count} outside [1, {self.capacity}]")

    @property
    def side(self) -> int:
        return self.sub_keys.shape[0]

    @property
    def capacity(self) -> int:
        return self.side * self.side

    def full_keys(self) -> np.ndarray:
        """All N keys; row ``a * side + b`` is ``[C[a]; C'[b]]``."""
        s = self.side
        return np.concatenate(
            [np.repeat(self.sub_keys, s, axis=0), np.tile(self.sub_keys_prime, (s, 1))], axis=1
        )


def split_query(q):
    """First and second halves of the last axis (numpy array or Tensor)."""
    d = q.shape[-1]
    if d % 2:
        raise ConfigError(f"query width must be even to split into halves, got d={d}")
    return q[..., : d // 2], q[..., d // 2 :]


def _topk_lexical(scores: np.ndarray, flat_ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best entries per row: higher score first, then smaller id."""
    n = scores.shape[-1]
    if k < n:
        # Partition first; the full sort is only needed when ties straddle the cut.
        part = np.argpartition(-scores, k - 1, axis=-1)[..., :k]
        top = np.take_along_axis(scores, part, axis=-1)
        kth = top.min(axis=-1, keepdims=True)
        if ((scores >= kth).sum(axis=-1) == k).all():
            ids = np.take_along_axis(np.broadcast_to(flat_ids, scores.shape), part, axis=-1)
            order = np.lexsort((ids, -top), axis=-1)
            return np.take_along_axis(part, order, axis=-1)
    order = np.lexsort((flat_ids, -scores), axis=-1)
    return order[..., :k]


def stage1_candidates(q: np.ndarray, keys: ProductKeySet, k: int | None = None) -> np.ndarray:
    """Exact top-k slot indices for each query in ``q`` (shape (..., d)).

    Returns (..., k) int64 indices, best first; ties go to the smaller index.
    """
    k = keys.candidate_count if k is None else k
    if not 1 <= k <= keys.capacity:
        raise ConfigError(f"candidate count {k} outside [1, {keys.capacity}]")
    q = np.asarray(q, dtype=np.float64)
    lead = q.shape[:-1]
    q = q.reshape(-1, q.shape[-1])
    q1, q2 = split_query(q)
    s = keys.side
    kk = min(k, s)
    s1 = q1 @ keys.sub_keys.T  # (M, s)
    s2 = q2 @ keys.sub_keys_prime.T
    ids = np.broadcast_to(np.arange(s), s1.shape)
    top_a = _topk_lexical(s1, ids, kk)  # (M, kk)
    top_b = _topk_lexical(s2, ids, kk)
    rows = np.arange(q.shape[0])[:, None]
    sa = s1[rows, top_a]  # (M, kk)
    sb = s2[rows, top_b]
    combined = (sa[:, :, None] + sb[:, None, :]).reshape(q.shape[0], -1)
    flat = (top_a[:, :, None] * s + top_b[:, None, :]).reshape(q.shape[0], -1)
    best = _topk_lexical(combined, flat, k)
    out = np.take_along_axis(flat, best, axis=-1)
    return out.reshape(*lead, k)


def brute_force_topI(q: np.ndarray, keys: ProductKeySet, k: int) -> np.ndarray:
    """Reference top-k over all N materialised keys, same tie-break."""
    q = np.asarray(q, dtype=np.float64)
    lead = q.shape[:-1]
    q = q.reshape(-1, q.shape[-1])
    full = keys.full_keys()
    scores = q @ full.T
    ids = np.broadcast_to(np.arange(full.shape[0]), scores.shape)
    return _topk_lexical(scores, ids, k).reshape(*lead, k)


@dataclass(frozen=True)
class StageOneCost:
    subkey_products: int
    combinations: int
    brute_force_products: int

    @property
    def total(self) -> int:
        return self.subkey_products + self.combinations

    @property
    def saves_work(self) -> bool:
        return self.total < self.brute_force_products


def stage1_cost(capacity: int, k: int) -> StageOneCost:
    side = math.isqrt(capacity)
    if side * side != capacity:
        raise ConfigError(f"capacity must be a perfect square, got {capacity}")
    kk = min(k, side)
    return StageOneCost(2 * side, kk * kk, capacity)


# ----------------------------------------------------------------- stage 2


@dataclass
class SelectionResult:
    candidates: np.ndarray  # (M, k) bank indices (or positions when unknown)
    similarities: nm.Tensor  # (M, k) cosine
    gumbel_noise: np.ndarray  # (M, k)
    weights: nm.Tensor  # (M, k) p
    hard_position: np.ndarray  # (M,) argmax p
    hard_index: np.ndarray  # (M,) bank index actually fused
    temperature: float
    output: nm.Tensor  # (M, d)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    eps = np.clip(rng.random(shape), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(eps))


def stage2_select(
    q: nm.Tensor,
    candidate_embeddings: nm.Tensor,
    tau: float,
    rng: np.random.Generator | None = None,
    train_mode: bool = True,
    candidates: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    straight_through: bool = True,
    values: nm.Tensor | None = None,
) -> SelectionResult:
    """Gumbel-softmax selection among the candidates of each query.

    ``q`` is (M, d) or (d,); ``candidate_embeddings`` (M, k, d) or (k, d).
    ``noise`` overrides the Gumbel draw (fixed-noise tests). Evaluation mode
    uses no noise. With ``straight_through=False`` the output is the soft
    mixture itself. ``values`` (same shape as the candidates) are what gets
    mixed and returned; by default the candidate embeddings themselves.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    single = q.ndim == 1
    if single:
        q = nm.reshape(q, (1, -1))
        candidate_embeddings = nm.reshape(candidate_embeddings, (1,) + candidate_embeddings.shape)
    m, k, d = candidate_embeddings.shape
    if k == 0:
        raise ContractError("stage 2 needs at least one candidate")
    if candidates is None:
        candidates = np.broadcast_to(np.arange(k), (m, k))

    norms = np.sqrt((candidate_embeddings.data**2).sum(-1))
    if (norms == 0).any():
        r, c = np.argwhere(norms == 0)[0]
        raise DegenerateEntryError(f"candidate entry {int(candidates[r, c])} has a zero-norm embedding")
    if (np.sqrt((q.data**2).sum(-1)) == 0).any():
        raise DegenerateEntryError("query vector has zero norm")

    cs = nm.cosine_similarity(nm.reshape(q, (m, 1, d)), candidate_embeddings, axis=-1)  # (m, k)
    if noise is not None:
        g = np.broadcast_to(np.asarray(noise, dtype=np.float64), (m, k)).copy()
    elif train_mode:
        if rng is None:
            raise ContractError("train-mode selection needs an explicit random generator")
        g = gumbel_noise(rng, (m, k))
    else:
        g = np.zeros((m, k))
    p = nm.softmax((cs + nm.Tensor(g)) * (1.0 / tau), axis=-1)
    hard_pos = np.argmax(p.data, axis=-1)
    hard_index = np.asarray(candidates)[np.arange(m), hard_pos].copy()

    if values is None:
        values = candidate_embeddings
    elif single:
        values = nm.reshape(values, (1,) + values.shape)
    if values.shape[:2] != (m, k):
        raise ContractError(f"values {values.shape} do not match candidates {candidate_embeddings.shape}")
    dv = values.shape[-1]
    soft = nm.reshape(nm.matmul(nm.reshape(p, (m, 1, k)), values), (m, dv))
    if straight_through:
        hard = values.data[np.arange(m), hard_pos]
        output = soft + nm.Tensor(hard - soft.data)
    else:
        output = soft
    if single:
        output = nm.reshape(output, (dv,))
    return SelectionResult(np.asarray(candidates), cs, g, p, hard_pos, hard_index, tau, output)
