"""The explicit memory bank: N fixed entries of L token ids each.

Entries stay human-readable token sequences at all times. The frozen
partition never changes after construction; the updatable partition keeps
an EMA of the queries that selected each entry and is periodically
requantised back to tokens (slot 0 by default).
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
import uuid as uuidlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nm
from .corpus import SPECIALS, Vocab, normalize
from .errors import (
    BoundsError,
    ConfigError,
    DegenerateEntryError,
    FreezeViolationError,
    MagicError,
    TruncatedFileError,
    VersionError,
)

BANK_MAGIC = b"XLMB"
BANK_VERSION = 1
EMA_EPSILON = 1e-5


@dataclass
class MemoryBank:
    entries: np.ndarray  # (N, L) int64 token ids
    freeze_mask: np.ndarray  # (N,) bool, True = frozen
    uuids: list[uuidlib.UUID]
    vocab_size: int
    rho: float
    pad_id: int = 0
    version: int = field(default=0, compare=False)  # bumped whenever entries change

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.int64)
        self.freeze_mask = np.asarray(self.freeze_mask, dtype=bool)
        n, side = self.capacity, math.isqrt(self.capacity)
        if side * side != n:
            raise ConfigError(f"bank capacity must be a perfect square, got {n}")
        if self.freeze_mask.shape != (n,) or len(self.uuids) != n:
            raise ConfigError("freeze mask and uuid list must have one element per entry")
        if self.entries.size and (self.entries.min() < 0 or self.entries.max() >= self.vocab_size):
            raise BoundsError("bank holds token ids outside the vocabulary")

    @property
    def capacity(self) -> int:
        return self.entries.shape[0]

    @property
    def entry_length(self) -> int:
        return self.entries.shape[1]

    @property
    def side(self) -> int:
        return math.isqrt(self.capacity)

    @property
    def updatable_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.freeze_mask)

    @property
    def frozen_indices(self) -> np.ndarray:
        return np.flatnonzero(self.freeze_mask)

    def index_of(self, uid: uuidlib.UUID) -> int:
        try:
            return self._uuid_index[uid]
        except AttributeError:
            self._uuid_index = {u: i for i, u in enumerate(self.uuids)}
            return self.index_of(uid)
        except KeyError:
            raise KeyError(f"uuid {uid} is not stored in the bank") from None

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        idx = self.frozen_indices
        h.update(idx.astype("<u8").tobytes())
        h.update(self.entries[idx].astype("<u4").tobytes())
        for i in idx:
            h.update(self.uuids[i].bytes)
        return h.hexdigest()

    def copy(self) -> "MemoryBank":
        return MemoryBank(
            self.entries.copy(), self.freeze_mask.copy(), list(self.uuids), self.vocab_size, self.rho, self.pad_id
        )


@dataclass
class EmaState:
    """EMA statistics for the updatable entries, in increasing bank-index order.

    The running sum is implied: ``sum = shadow * (cluster_size + epsilon)``.
    """

    shadow: np.ndarray  # (N_u, d)
    cluster_size: np.ndarray  # (N_u,)
    decay: float
    epsilon: float = EMA_EPSILON

    def copy(self) -> "EmaState":
        return EmaState(self.shadow.copy(), self.cluster_size.copy(), self.decay, self.epsilon)


# --------------------------------------------------------------- token maps


def tokenize_entry(text: str, vocab: Vocab, length: int) -> list[int]:
    ids = vocab.encode(normalize(text))[:length]
    return ids + [vocab.pad_id] * (length - len(ids))


def detokenize_entry(entry: Iterable[int], vocab: Vocab) -> str:
    return vocab.decode(entry, skip_pad=True)


def embed_entry(bank: MemoryBank, i: int, table: nm.Tensor) -> nm.Tensor:
    """(d, L) matrix whose column j is the embedding of token m_ij."""
    if not 0 <= i < bank.capacity:
        raise BoundsError(f"entry index {i} outside [0, {bank.capacity})")
    return nm.transpose(nm.take_rows(table, bank.entries[i]))


def pool_entry(embedded: nm.Tensor, pad_mask: np.ndarray) -> nm.Tensor:
    """Mean over the non-PAD columns of a (d, L) entry embedding."""
    keep = ~np.asarray(pad_mask, dtype=bool)
    if not keep.any():
        raise DegenerateEntryError("entry consists only of PAD tokens")
    weights = nm.Tensor(keep.astype(np.float64) / keep.sum())
    return nm.matmul(embedded, nm.reshape(weights, (-1, 1))).reshape(-1)


def pooling_matrix(bank: MemoryBank) -> np.ndarray:
    """(N, |V|) matrix A with ``A @ table`` = pooled embedding of every entry."""
    n = bank.capacity
    keep = bank.entries != bank.pad_id
    counts = keep.sum(axis=1)
    if (counts == 0).any():
        bad = int(np.flatnonzero(counts == 0)[0])
        raise DegenerateEntryError(f"entry {bad} consists only of PAD tokens")
    mat = np.zeros((n, bank.vocab_size))
    rows = np.repeat(np.arange(n), bank.entry_length)[keep.reshape(-1)]
    np.add.at(mat, (rows, bank.entries[keep]), 1.0)
    return mat / counts[:, None]


def pool_all(bank: MemoryBank, table: nm.Tensor, cache: dict | None = None) -> nm.Tensor:
    """Pooled (N, d) embeddings of every entry, differentiable wrt ``table``."""
    if cache is not None:
        key = (id(bank), bank.version)
        if cache.get("key") != key:
            cache["key"], cache["mat"] = key, pooling_matrix(bank)
        mat = cache["mat"]
    else:
        mat = pooling_matrix(bank)
    return nm.matmul(nm.Tensor(mat), table)


# ------------------------------------------------------------ construction


def partition(load_order: Sequence[int], capacity: int, rho: float) -> np.ndarray:
    """Freeze the first round(rho * N) entries in load order (curated first)."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"freeze rate must lie in [0, 1], got {rho}")
    mask = np.zeros(capacity, dtype=bool)
    mask[np.asarray(load_order[: round(rho * capacity)], dtype=np.int64)] = True
    return mask


def content_layout(token_rows: np.ndarray, side: int, pad_id: int = 0) -> np.ndarray:
    """Grid slot for each entry, in load order.

    Rows group entries by their first token and columns by their second, so
    that each row (column) holds as few distinct leading (second) tokens as
    possible. First tokens are packed into rows first-fit by decreasing
    count; inside a row an entry takes the free column that already hosts
    its second token, else the free column with the fewest distinct second
    tokens.
    """
    n = token_rows.shape[0]
    if n > side * side:
        raise ConfigError(f"{n} entries do not fit a {side}x{side} grid")
    groups: dict[int, list[int]] = {}
    for k, row in enumerate(token_rows):
        groups.setdefault(int(row[0]), []).append(k)
    free_in_row = np.full(side, side)
    row_of = np.empty(n, dtype=np.int64)
    for tok in sorted(groups, key=lambda t: (-len(groups[t]), t)):
        members = groups[tok]
        while members:
            r = int(np.argmax(free_in_row))  # most room, lowest index on ties
            take = min(len(members), int(free_in_row[r]))
            row_of[members[:take]] = r
            free_in_row[r] -= take
            members = members[take:]

    taken = np.zeros((side, side), dtype=bool)
    col_tokens: list[set[int]] = [set() for _ in range(side)]
    slots = np.empty(n, dtype=np.int64)
    for k in np.argsort(row_of, kind="stable"):
        r = int(row_of[k])
        second = int(token_rows[k, 1]) if token_rows.shape[1] > 1 else pad_id
        free = np.flatnonzero(~taken[r])
        hosting = [c for c in free if second != pad_id and second in col_tokens[c]]
        if hosting:
            c = int(hosting[0])
        else:
            c = int(min(free, key=lambda c: (len(col_tokens[c]), c)))
        taken[r, c] = True
        if second != pad_id:
            col_tokens[c].add(second)
        slots[k] = r * side + c
    return slots


def key_indicators(
    bank: MemoryBank, excluded: Iterable[int] = (0, 1, 2), normalize: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """(side, |V|) matrices over the distinct first tokens of each row and the
    distinct second tokens of each column of the grid.

    With ``normalize`` each row of the result averages its tokens, so a
    direction shared by all embeddings shifts every sub-key score equally.
    """
    s, v = bank.side, bank.vocab_size
    grid = bank.entries.reshape(s, s, bank.entry_length)
    rows, cols = np.zeros((s, v)), np.zeros((s, v))
    rows[np.repeat(np.arange(s), s), grid[:, :, 0].reshape(-1)] = 1.0
    if bank.entry_length > 1:
        cols[np.tile(np.arange(s), s), grid[:, :, 1].reshape(-1)] = 1.0
    drop = list(excluded)
    rows[:, drop] = 0.0
    cols[:, drop] = 0.0
    if normalize:
        rows /= np.maximum(rows.sum(axis=1, keepdims=True), 1.0)
        cols /= np.maximum(cols.sum(axis=1, keepdims=True), 1.0)
    return rows, cols


def build_bank(
    curated: Sequence[tuple[uuidlib.UUID, str]],
    updatable: Sequence[tuple[uuidlib.UUID, str]],
    vocab: Vocab,
    capacity: int,
    entry_length: int,
    rho: float,
    rng: np.random.Generator,
    layout: str = "content",
    updatable_init: str = "corpus",
) -> MemoryBank:
    """Load curated entries first, then updatable text, then random fill.

    With ``updatable_init="random"`` the updatable text is ignored and every
    non-curated slot holds random tokens.
    """
    side = math.isqrt(capacity)
    if side * side != capacity:
        raise ConfigError(f"bank capacity must be a perfect square, got {capacity}")
    n_frozen = round(rho * capacity)
    if len(curated) < n_frozen:
        raise ConfigError(f"need {n_frozen} curated entries for rho={rho}, got {len(curated)}")
    texts = list(curated)
    if updatable_init == "corpus":
        texts += list(updatable)
    elif updatable_init != "random":
        raise ConfigError(f"unknown updatable_init {updatable_init!r}")
    texts = texts[:capacity]
    rows = [tokenize_entry(text, vocab, entry_length) for _, text in texts]
    uids = [u for u, _ in texts]
    content_ids = np.array([i for i, w in enumerate(vocab.itos) if w not in SPECIALS])
    while len(rows) < capacity:
        n_tok = int(rng.integers(1, entry_length + 1))
        toks = rng.choice(content_ids, size=n_tok).tolist()
        rows.append(toks + [vocab.pad_id] * (entry_length - n_tok))
        uids.append(uuidlib.UUID(bytes=rng.bytes(16), version=4))
    rows_arr = np.array(rows, dtype=np.int64)

    if layout == "content":
        slots = content_layout(rows_arr, side, vocab.pad_id)
    elif layout == "sequential":
        slots = np.arange(capacity)
    else:
        raise ConfigError(f"unknown bank layout {layout!r}")
    entries = np.empty_like(rows_arr)
    entries[slots] = rows_arr
    placed = [None] * capacity
    for k, s in enumerate(slots):
        placed[s] = uids[k]
    mask = partition(slots, capacity, rho)
    return MemoryBank(entries, mask, placed, len(vocab), rho, vocab.pad_id)


def init_ema(bank: MemoryBank, table: np.ndarray, decay: float, epsilon: float = EMA_EPSILON) -> EmaState:
    """Shadows start at each updatable entry's pooled embedding with count 1."""
    idx = bank.updatable_indices
    pooled = pooling_matrix(bank)[idx] @ table if len(idx) else np.zeros((0, table.shape[1]))
    return EmaState(pooled, np.ones(len(idx)), decay, epsilon)


# --------------------------------------------------------------------- EMA


def ema_update(
    ema: EmaState,
    bank: MemoryBank,
    indices: Sequence[int],
    queries: np.ndarray,
    decay: float | None = None,
) -> EmaState:
    """One EMA step over all updatable entries.

    ``indices`` are bank indices, ``queries`` the matching (k, d) vectors.
    Every count decays; entries with assignments mix in the mean of their
    queries, untouched shadows stay where they are.
    """
    gamma = ema.decay if decay is None else decay
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    queries = np.asarray(queries, dtype=np.float64).reshape(len(indices), -1) if len(indices) else queries
    if len(indices) and bank.freeze_mask[indices].any():
        bad = int(indices[bank.freeze_mask[indices]][0])
        raise FreezeViolationError(f"EMA assignment targets frozen entry {bad}")
    upd = bank.updatable_indices
    pos = np.searchsorted(upd, indices)
    n_u = len(upd)
    counts = np.bincount(pos, minlength=n_u).astype(np.float64)
    sums = np.zeros_like(ema.shadow)
    if len(indices):
        np.add.at(sums, pos, queries)

    running = ema.shadow * (ema.cluster_size + ema.epsilon)[:, None]
    cluster = gamma * ema.cluster_size + (1.0 - gamma) * counts
    running = gamma * running + (1.0 - gamma) * sums
    shadow = ema.shadow.copy()
    touched = counts > 0
    shadow[touched] = running[touched] / (cluster[touched] + ema.epsilon)[:, None]
    return EmaState(shadow, cluster, ema.decay, ema.epsilon)


# ------------------------------------------------------------ requantising


def _content_ids(vocab_size: int, excluded: Iterable[int]) -> np.ndarray:
    mask = np.ones(vocab_size, dtype=bool)
    mask[list(excluded)] = False
    return np.flatnonzero(mask)


def nearest_token(vector: np.ndarray, table: np.ndarray, candidates: np.ndarray) -> int:
    """Euclidean nearest row of ``table`` among ``candidates``; ties go to the lower id."""
    d2 = ((table[candidates] - vector) ** 2).sum(axis=1)
    return int(candidates[int(np.argmin(d2))])


def requantize_entry(
    shadow: np.ndarray,
    table: np.ndarray,
    current: np.ndarray,
    mode: str = "slot0",
    excluded: Iterable[int] = (0, 1, 2),
) -> np.ndarray:
    """Project a shadow vector back onto token ids.

    ``slot0`` rewrites only the first slot with the nearest token;
    ``full-greedy`` rebuilds all non-PAD slots so their mean tracks the shadow.
    Special tokens (PAD/UNK/BOS by default) are never written.
    """
    shadow = np.asarray(shadow, dtype=np.float64)
    candidates = _content_ids(table.shape[0], excluded)
    out = np.array(current, dtype=np.int64, copy=True)
    if mode == "slot0":
        out[0] = nearest_token(shadow, table, candidates)
        return out
    if mode != "full-greedy":
        raise ConfigError(f"unknown requantize mode {mode!r}")
    pad = next(iter(excluded))
    n_slots = max(int((out != pad).sum()), 1)
    chosen_sum = np.zeros_like(shadow)
    picks = []
    for j in range(n_slots):
        trial = (chosen_sum + table[candidates]) / (j + 1)
        k = int(np.argmin(((trial - shadow) ** 2).sum(axis=1)))
        picks.append(int(candidates[k]))
        chosen_sum += table[candidates[k]]
    out[:] = pad
    out[:n_slots] = picks
    return out


def requantize_bank(
    bank: MemoryBank,
    ema: EmaState,
    table: np.ndarray,
    only: np.ndarray | None = None,
    mode: str = "slot0",
    excluded: Iterable[int] = (0, 1, 2),
) -> int:
    """Rewrite updatable entries in place from their shadows; returns #changed.

    ``only`` is an optional boolean mask over the updatable entries.
    """
    upd = bank.updatable_indices
    changed = 0
    excluded = tuple(excluded)
    for k, i in enumerate(upd):
        if only is not None and not only[k]:
            continue
        new = requantize_entry(ema.shadow[k], table, bank.entries[i], mode, excluded)
        if not np.array_equal(new, bank.entries[i]):
            bank.entries[i] = new
            changed += 1
    if changed:
        bank.version += 1
    return changed


# ------------------------------------------------------------- persistence


def dump_bank(bank: MemoryBank, ema: EmaState | None = None) -> bytes:
    n, length = bank.entries.shape
    buf = io.BytesIO()
    buf.write(BANK_MAGIC)
    buf.write(struct.pack("<IQIId", BANK_VERSION, n, length, bank.vocab_size, bank.rho))
    buf.write(bank.entries.astype("<u4").tobytes())
    buf.write(bank.freeze_mask.astype(np.uint8).tobytes())
    buf.write(b"".join(u.bytes for u in bank.uuids))
    if ema is None:
        buf.write(b"\x00")
    else:
        n_u, d = ema.shadow.shape
        buf.write(b"\x01")
        buf.write(struct.pack("<QId", n_u, d, ema.decay))
        buf.write(ema.cluster_size.astype("<f8").tobytes())
        buf.write(ema.shadow.astype("<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file truncated: wanted {n} bytes at offset {self.pos}, have {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_bank(data: bytes) -> tuple[MemoryBank, EmaState | None]:
    r = _Reader(data)
    magic = r.take(4)
    if magic != BANK_MAGIC:
        raise MagicError(f"bad bank magic {magic!r}, expected {BANK_MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != BANK_VERSION:
        raise VersionError(f"bank file version {version} does not match supported version {BANK_VERSION}")
    n, length, vocab_size, rho = r.unpack("<QIId")
    entries = np.frombuffer(r.take(4 * n * length), dtype="<u4").reshape(n, length).astype(np.int64)
    mask = np.frombuffer(r.take(n), dtype=np.uint8).astype(bool)
    raw = r.take(16 * n)
    uuids = [uuidlib.UUID(bytes=raw[16 * i : 16 * i + 16]) for i in range(n)]
    (has_ema,) = r.unpack("<B")
    ema = None
    if has_ema:
        n_u, d, decay = r.unpack("<QId")
        sizes = np.frombuffer(r.take(8 * n_u), dtype="<f8").astype(np.float64)
        shadow = np.frombuffer(r.take(8 * n_u * d), dtype="<f8").reshape(n_u, d).astype(np.float64)
        ema = EmaState(shadow, sizes, decay)
    if r.pos != len(data):
        raise TruncatedFileError(f"{len(data) - r.pos} trailing bytes after bank payload")
    return MemoryBank(entries, mask, uuids, vocab_size, rho), ema


def save_bank(bank: MemoryBank, ema: EmaState | None, path: str | Path) -> None:
    Path(path).write_bytes(dump_bank(bank, ema))


def load_bank(path: str | Path) -> tuple[MemoryBank, EmaState | None]:
    return parse_bank(Path(path).read_bytes())
