"""Decoder-only transformer whose layers read from a shared explicit memory bank.

Each memory layer runs, after its attention sublayer:

    query   = W_l (causal prefix mean of the input tokens' memory embeddings) + b_l
    stage 1 = exact top-|I| product-key candidates
    stage 2 = Gumbel-softmax pick among the candidates (straight-through)
    fuse    = hidden + sigmoid(gate_l) * value of the picked entry

A query is formed at every position from that position's prefix only, which
keeps the model causal. The product sub-keys are tied to the memory table
and to the bank grid: ``C[a]`` is the mean first-half embedding of the
distinct first tokens stored in row ``a``, ``C'[b]`` the mean second-half
embedding of the distinct second tokens in column ``b``. The value is, by
default, the picked entry's token at the slot aligned with the position.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses
from . import numerics as nm
from .bank import (
    EmaState,
    MemoryBank,
    ema_update,
    init_ema,
    key_indicators,
    pooling_matrix,
    requantize_bank,
)
from .corpus import SPECIALS, Vocab, normalize
from .errors import (
    BoundsError,
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    MagicError,
    NumericError,
    TruncatedFileError,
    VersionError,
)
from .retrieval import ProductKeySet, SelectionResult, stage1_candidates, stage2_select

CKPT_MAGIC = b"XLMC"
CKPT_VERSION = 1
_NEG = -1e9


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 1
    max_seq_len: int = 64
    capacity: int = 1024
    entry_length: int = 8
    rho: float = 0.2
    candidate_count: int = 16
    temperature: float = 1.0
    temperature_final: float = 0.0
    anneal_steps: int = 0
    lambda_sim: float = 0.1
    lambda_div: float = 0.01
    decay: float = 0.99
    learning_rate: float = 0.1
    seed: int = 0
    memory_enabled: bool = True
    ffn_mult: int = 4
    grad_clip: float = 1.0
    init_std: float = 0.02
    requantize_every: int = 100
    requantize_mode: str = "slot0"
    straight_through: bool = True
    query_source: str = "input"
    shared_memory_table: bool = False
    value_pool: str = "aligned"
    gate_init: float = -2.0
    train_memory_table: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d", "n_layers", "n_heads", "vocab_size", "max_seq_len", "capacity", "entry_length",
                     "candidate_count", "ffn_mult", "requantize_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("temperature", "learning_rate", "grad_clip", "init_std"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % 2:
            raise ConfigError(f"d must be even so queries split into halves, got {self.d}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        side = math.isqrt(self.capacity)
        if side * side != self.capacity:
            raise ConfigError(f"bank capacity must be a perfect square, got {self.capacity}")
        if not 1 <= self.candidate_count <= self.capacity:
            raise ConfigError(f"candidate_count {self.candidate_count} outside [1, {self.capacity}]")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"EMA decay must lie in (0, 1], got {self.decay}")
        if self.query_source not in ("input", "hidden"):
            raise ConfigError(f"query_source must be 'input' or 'hidden', got {self.query_source!r}")
        if self.value_pool not in ("mean", "aligned"):
            raise ConfigError(f"value_pool must be 'mean' or 'aligned', got {self.value_pool!r}")
        if self.anneal_steps < 0:
            raise ConfigError(f"anneal_steps must be >= 0, got {self.anneal_steps}")
        if self.anneal_steps and not self.temperature_final > 0:
            raise ConfigError(f"annealing needs a positive temperature_final, got {self.temperature_final}")
        if self.requantize_mode not in ("slot0", "full-greedy"):
            raise ConfigError(f"unknown requantize_mode {self.requantize_mode!r}")

    @property
    def side(self) -> int:
        return math.isqrt(self.capacity)

    @property
    def ffn_width(self) -> int:
        """Hidden FFN width; the memory-free model is widened to match parameters."""
        base = self.ffn_mult * self.d
        if self.memory_enabled:
            return base
        memory = self.n_layers * (self.d * self.d + self.d + 1)  # query maps, biases, gates
        if not self.shared_memory_table:
            memory += self.vocab_size * self.d
        return base + round(memory / (self.n_layers * (2 * self.d + 1)))

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        values = {} if base is None else asdict(base)
        values.update(parse_overrides(text.splitlines()))
        return cls(**values)

    def replace(self, **changes) -> "ModelConfig":
        values = asdict(self)
        for k in changes:
            if k not in values:
                raise ConfigError(f"unknown config key {k!r}")
        values.update(changes)
        return ModelConfig(**values)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_overrides(lines: Sequence[str]) -> dict:
    """``key=value`` lines (``#`` comments allowed) into typed config values."""
    types = {f.name: f.type for f in fields(ModelConfig)}
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"config line {n}: expected key=value, got {raw!r}")
        if key not in types:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        out[key] = _coerce(key, types[key], value)
    return out


def _coerce(key: str, kind, value: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind}") from None


# ------------------------------------------------------------------ params


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, nm.Tensor]:
    d, v, f, s = cfg.d, cfg.vocab_size, cfg.ffn_width, cfg.init_std
    out_std = s / math.sqrt(2 * cfg.n_layers)
    p: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0, s, (v, d)),
        "pos_emb": rng.normal(0, s * 0.1, (cfg.max_seq_len, d)),
    }
    if cfg.memory_enabled and not cfg.shared_memory_table:
        p["mem_emb"] = p["tok_emb"].copy()
    for i in range(cfg.n_layers):
        p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"] = np.ones(d), np.zeros(d)
        p[f"l{i}.attn.w_qkv"], p[f"l{i}.attn.b_qkv"] = rng.normal(0, s, (d, 3 * d)), np.zeros(3 * d)
        p[f"l{i}.attn.w_o"], p[f"l{i}.attn.b_o"] = rng.normal(0, out_std, (d, d)), np.zeros(d)
        if cfg.memory_enabled:
            p[f"l{i}.query.w"], p[f"l{i}.query.b"] = np.eye(d), np.zeros(d)
            p[f"l{i}.gate"] = np.array(float(cfg.gate_init))
        p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"] = np.ones(d), np.zeros(d)
        p[f"l{i}.ffn.w1"], p[f"l{i}.ffn.b1"] = rng.normal(0, s, (d, f)), np.zeros(f)
        p[f"l{i}.ffn.w2"], p[f"l{i}.ffn.b2"] = rng.normal(0, out_std, (f, d)), np.zeros(d)
    p["ln_f.g"], p["ln_f.b"] = np.ones(d), np.zeros(d)
    return {k: nm.parameter(a, name=k) for k, a in p.items()}


def param_group(name: str) -> str:
    """Coarse group used by gradient checks and reports."""
    if name in ("tok_emb", "pos_emb"):
        return "embeddings"
    if name == "mem_emb":
        return "memory_embeddings"
    part = name.split(".")[1] if "." in name else name
    return {"attn": "attention", "ffn": "ffn", "query": "query", "gate": "gate"}.get(part, "layer_norm")


def count_params(params: dict[str, nm.Tensor]) -> int:
    return int(sum(t.size for t in params.values()))


# -------------------------------------------------------------------- trace


@dataclass
class LayerSelection:
    """One layer's retrieval over the valid query positions of a batch."""

    positions: np.ndarray  # (M, 2) (row, time) of each query
    queries: nm.Tensor  # (M, d)
    candidate_embeddings: nm.Tensor  # (M, k, d)
    result: SelectionResult
    forced: np.ndarray  # (M,) bool, True where an intervention replaced the pick

    @property
    def hard_index(self) -> np.ndarray:
        return self.result.hard_index

    def grid(self, shape: tuple[int, int]) -> np.ndarray:
        """(B, T) bank index picked at each position, -1 where no query ran."""
        out = np.full(shape, -1, dtype=np.int64)
        out[self.positions[:, 0], self.positions[:, 1]] = self.hard_index
        return out


@dataclass
class ForwardTrace:
    logits: nm.Tensor  # (B, T, V)
    per_layer: list[LayerSelection] = field(default_factory=list)
    valid: np.ndarray | None = None  # (B, T) positions holding a real input token

    @property
    def pooled_queries(self) -> list[nm.Tensor]:
        return [s.queries for s in self.per_layer]


# --------------------------------------------------------------------- model


def memory_fusion(hidden: nm.Tensor, selected: nm.Tensor, gate: nm.Tensor) -> nm.Tensor:
    """Gated add of the retrieved value; ``selected`` broadcasts against ``hidden``."""
    return hidden + nm.sigmoid(gate) * selected


def _causal_mean_matrix(t: int) -> np.ndarray:
    """Row j averages positions 1..j; the BOS slot only stands in at j = 0."""
    tri = np.tril(np.ones((t, t)))
    tri[1:, 0] = 0.0
    return tri / tri.sum(axis=1, keepdims=True)


class ExplicitLM:
    """Model parameters plus the bank, EMA state and training counters."""

    def __init__(
        self,
        cfg: ModelConfig,
        bank: MemoryBank | None = None,
        params: dict[str, nm.Tensor] | None = None,
        ema: EmaState | None = None,
    ):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        self.params = init_params(cfg, rng) if params is None else params
        if cfg.memory_enabled:
            if bank is None:
                raise ContractError("a memory-enabled model needs a bank")
            if bank.capacity != cfg.capacity or bank.entry_length != cfg.entry_length:
                raise DimensionError(
                    f"bank is {bank.capacity}x{bank.entry_length}, config expects {cfg.capacity}x{cfg.entry_length}"
                )
            if bank.vocab_size != cfg.vocab_size:
                raise DimensionError(f"bank vocabulary {bank.vocab_size} != model vocabulary {cfg.vocab_size}")
        self.bank = bank
        self.ema = ema
        if cfg.memory_enabled and self.ema is None:
            self.ema = init_ema(bank, self.memory_table.data, cfg.decay)
        self.step = 0
        self.train_rng = np.random.default_rng([cfg.seed, 1])
        self.touched = np.zeros(0 if bank is None else len(bank.updatable_indices), dtype=bool)
        self._pool_cache: dict = {}

    # ----------------------------------------------------------- helpers

    @property
    def memory_table(self) -> nm.Tensor:
        """Embedding table used by the bank: pooling, sub-keys, queries, EMA."""
        return self.params["tok_emb" if self.cfg.shared_memory_table else "mem_emb"]

    def n_params(self) -> int:
        return count_params(self.params)

    def _bank_cache(self) -> dict:
        key = self.bank.version
        if self._pool_cache.get("key") != key:
            rows, cols = key_indicators(self.bank)
            self._pool_cache = {"key": key, "mat": pooling_matrix(self.bank), "rows": rows, "cols": cols}
        return self._pool_cache

    def product_keys(self) -> ProductKeySet:
        """Sub-keys tied to the embeddings of the bank's leading tokens."""
        table = self.memory_table.data
        h, c = self.cfg.d // 2, self._bank_cache()
        return ProductKeySet(c["rows"] @ table[:, :h], c["cols"] @ table[:, h:], self.cfg.candidate_count)

    def temperature(self) -> float:
        """Stage-2 temperature, linearly annealed when ``anneal_steps`` > 0."""
        cfg = self.cfg
        if cfg.anneal_steps <= 0:
            return cfg.temperature
        frac = min(1.0, self.step / cfg.anneal_steps)
        return cfg.temperature + frac * (cfg.temperature_final - cfg.temperature)

    def pooling(self) -> np.ndarray:
        return self._bank_cache()["mat"]

    def entry_embeddings(self, indices) -> np.ndarray:
        """Pooled embeddings of the given bank entries (no graph)."""
        return self.pooling()[np.asarray(indices)] @ self.memory_table.data

    # ------------------------------------------------------------ forward

    def forward(
        self,
        tokens,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
        noise: Sequence[np.ndarray] | None = None,
        force: dict[int, np.ndarray] | None = None,
        straight_through: bool | None = None,
    ) -> ForwardTrace:
        """Run the decoder over (B, T) input ids (PAD-padded on the right).

        ``noise`` gives a fixed Gumbel draw per layer; ``force`` maps layer
        index to a (B,) array of bank indices that replace the picked entry at
        every position of that row (-1 leaves the row alone).
        """
        cfg, p = self.cfg, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        b, t = tokens.shape
        if t > cfg.max_seq_len:
            raise BoundsError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise BoundsError("token id outside the vocabulary")
        st = cfg.straight_through if straight_through is None else straight_through
        pad = self.bank.pad_id if self.bank is not None else 0
        valid = tokens != pad
        valid[:, 0] = True

        x = nm.take_rows(p["tok_emb"], tokens) + p["pos_emb"][:t]
        trace = ForwardTrace(logits=None, valid=valid)
        mask = np.triu(np.full((t, t), _NEG), 1)
        if cfg.memory_enabled:
            keys = self.product_keys()
            pool = nm.Tensor(self.pooling())
            pooled_all = nm.matmul(pool, self.memory_table)
            if cfg.shared_memory_table and cfg.value_pool == "mean":
                values_all = pooled_all
            elif cfg.value_pool == "aligned":
                values_all = None
            else:
                values_all = nm.matmul(pool, p["tok_emb"])
            prefix = nm.Tensor(_causal_mean_matrix(t))
            source = nm.take_rows(self.memory_table, tokens) if cfg.query_source == "input" else None
            pos = np.argwhere(valid)
            flat = pos[:, 0] * t + pos[:, 1]
            scatter = np.full(b * t, len(pos), dtype=np.int64)
            scatter[flat] = np.arange(len(pos))

        for i in range(cfg.n_layers):
            x = x + self._attention(i, nm.layer_norm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"]), mask)
            if cfg.memory_enabled:
                sel = self._retrieve(
                    i, x if source is None else source, prefix, pos, flat, keys, pooled_all, values_all, train_mode, rng,
                    None if noise is None else noise[i], None if force is None else force.get(i), st,
                )
                trace.per_layer.append(sel)
                padded = nm.concat([sel.result.output, nm.Tensor(np.zeros((1, cfg.d)))], axis=0)
                fused = nm.reshape(nm.take_rows(padded, scatter), (b, t, cfg.d))
                x = memory_fusion(x, fused, p[f"l{i}.gate"])
            h = nm.layer_norm(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
            h = nm.gelu(nm.matmul(h, p[f"l{i}.ffn.w1"]) + p[f"l{i}.ffn.b1"])
            x = x + nm.matmul(h, p[f"l{i}.ffn.w2"]) + p[f"l{i}.ffn.b2"]

        x = nm.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        trace.logits = nm.matmul(x, nm.transpose(p["tok_emb"], (1, 0)))
        return trace

    def _attention(self, i: int, h: nm.Tensor, mask: np.ndarray) -> nm.Tensor:
        p, cfg = self.params, self.cfg
        b, t, d = h.shape
        nh, dh = cfg.n_heads, d // cfg.n_heads
        qkv = nm.matmul(h, p[f"l{i}.attn.w_qkv"]) + p[f"l{i}.attn.b_qkv"]
        qkv = nm.transpose(nm.reshape(qkv, (b, t, 3, nh, dh)), (2, 0, 3, 1, 4))  # (3, b, nh, t, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)) + nm.Tensor(mask)
        att = nm.matmul(nm.softmax(scores, axis=-1), v)  # (b, nh, t, dh)
        att = nm.reshape(nm.transpose(att, (0, 2, 1, 3)), (b, t, d))
        return nm.matmul(att, p[f"l{i}.attn.w_o"]) + p[f"l{i}.attn.b_o"]

    def query(self, i: int, x: nm.Tensor, prefix: nm.Tensor) -> nm.Tensor:
        """(B, T, d) queries: linear map of each position's causal prefix mean.

        ``x`` is the layer's hidden state or, with ``query_source="input"``,
        the input tokens embedded with the memory table.
        """
        p = self.params
        return nm.matmul(nm.matmul(prefix, x), p[f"l{i}.query.w"]) + p[f"l{i}.query.b"]

    def _retrieve(self, i, x, prefix, pos, flat, keys, pooled_all, values_all, train_mode, rng, noise, force, st):
        cfg = self.cfg
        q_all = self.query(i, x, prefix)
        q = nm.take_rows(nm.reshape(q_all, (-1, cfg.d)), flat)  # (M, d)
        cands = stage1_candidates(q.data, keys)
        cand_emb = nm.take_rows(pooled_all, cands)  # (M, k, d)
        if values_all is None:
            slot = np.minimum(pos[:, 1], cfg.entry_length - 1)
            cand_val = nm.take_rows(self.params["tok_emb"], self.bank.entries[cands, slot[:, None]])
        elif values_all is pooled_all:
            cand_val = cand_emb
        else:
            cand_val = nm.take_rows(values_all, cands)
        if train_mode and rng is None and noise is None:
            rng = self.train_rng
        result = stage2_select(q, cand_emb, self.temperature(), rng=rng, train_mode=train_mode,
                               candidates=cands, noise=noise, straight_through=st, values=cand_val)
        forced = np.zeros(len(pos), dtype=bool)
        if force is not None:
            gold = np.asarray(force, dtype=np.int64)[pos[:, 0]]
            forced = gold >= 0
            if forced.any():
                keep = nm.Tensor((~forced).astype(np.float64)[:, None])
                replacement = np.zeros((len(pos), cfg.d))
                if values_all is None:
                    tokens = self.bank.entries[gold[forced], slot[forced]]
                    replacement[forced] = self.params["tok_emb"].data[tokens]
                else:
                    replacement[forced] = values_all.data[gold[forced]]
                result.output = result.output * keep + nm.Tensor(replacement)
                result.hard_index = np.where(forced, gold, result.hard_index)
        return LayerSelection(pos, q, cand_emb, result, forced)

    # --------------------------------------------------------------- loss

    def loss(self, batch, rng=None, noise=None, straight_through=None, train_mode: bool = True):
        """Total objective for a (B, T+1) batch of BOS-prefixed, PAD-padded ids."""
        batch = np.asarray(batch, dtype=np.int64)
        inputs, targets = batch[:, :-1], batch[:, 1:]
        pad = self.bank.pad_id if self.bank is not None else 0
        trace = self.forward(inputs, train_mode=train_mode, rng=rng, noise=noise, straight_through=straight_through)
        l_ce = losses.lm_loss(trace.logits, targets, targets != pad)
        if self.cfg.memory_enabled:
            sims, divs = [], []
            for sel in trace.per_layer:
                sims.append(losses.relevance_loss(sel.queries, sel.candidate_embeddings, sel.result.weights))
                if self.cfg.candidate_count >= 2:
                    divs.append(losses.diversity_loss(sel.candidate_embeddings))
            n = len(trace.per_layer)
            l_sim = sum(sims[1:], sims[0]) * (1.0 / n)
            l_div = sum(divs[1:], divs[0]) * (1.0 / n) if divs else nm.Tensor(0.0)
        else:
            l_sim, l_div = nm.Tensor(0.0), nm.Tensor(0.0)
        total = losses.total_loss(l_ce, l_sim, l_div, self.cfg.lambda_sim, self.cfg.lambda_div, self.step)
        return total, losses.report(l_ce, l_sim, l_div, total, self.cfg.lambda_sim, self.cfg.lambda_div), trace

    # --------------------------------------------------------------- train

    def train_step(self, batch) -> losses.LossReport:
        """Forward, backward, clipped SGD update, then EMA and requantisation."""
        cfg = self.cfg
        for prm in self.params.values():
            prm.grad = None
        try:
            total, rep, trace = self.loss(batch, rng=self.train_rng)
        except NumericError as exc:
            raise DivergenceError(f"non-finite values at step {self.step}: {exc}", self.step) from exc
        total.backward()
        grads = [prm.grad for prm in self.params.values() if prm.grad is not None]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if not math.isfinite(norm):
            raise DivergenceError(f"non-finite gradient norm at step {self.step}", self.step)
        scale = cfg.learning_rate * min(1.0, cfg.grad_clip / (norm + 1e-12))
        for name, prm in self.params.items():
            if prm.grad is not None:
                if name != "mem_emb" or cfg.train_memory_table:
                    prm.data -= scale * prm.grad
                prm.grad = None
        self.step += 1
        if cfg.memory_enabled:
            self._update_memory(trace)
        return rep

    def _update_memory(self, trace: ForwardTrace) -> None:
        cfg, bank = self.cfg, self.bank
        idx = np.concatenate([s.hard_index for s in trace.per_layer])
        qs = np.concatenate([s.queries.data for s in trace.per_layer])
        keep = ~bank.freeze_mask[idx]
        idx, qs = idx[keep], qs[keep]
        if len(bank.updatable_indices):
            self.ema = ema_update(self.ema, bank, idx, qs)
            self.touched[np.searchsorted(bank.updatable_indices, idx)] = True
            if self.step % cfg.requantize_every == 0 and self.touched.any():
                requantize_bank(bank, self.ema, self.memory_table.data, only=self.touched,
                                mode=cfg.requantize_mode)
                self.touched[:] = False

    # --------------------------------------------------------- checkpoint

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(dump_checkpoint(self.cfg, self.params))

    @classmethod
    def load(cls, path: str | Path, bank: MemoryBank | None = None, ema: EmaState | None = None) -> "ExplicitLM":
        cfg, params = parse_checkpoint(Path(path).read_bytes())
        return cls(cfg, bank, {k: nm.parameter(v, name=k) for k, v in params.items()}, ema)


# -------------------------------------------------------------- sequences


def encode_batch(vocab: Vocab, sentences: Sequence[str], length: int | None = None) -> np.ndarray:
    """BOS + ids, PAD-padded to a common width (``length`` includes BOS)."""
    rows = [[vocab.bos_id] + vocab.encode(normalize(s)) for s in sentences]
    width = max(len(r) for r in rows) if length is None else length
    out = np.full((len(rows), width), vocab.pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r) > width:
            raise BoundsError(f"sentence of {len(r)} tokens exceeds width {width}")
        out[i, : len(r)] = r
    return out


# ------------------------------------------------------------- checkpoint


def dump_checkpoint(cfg: ModelConfig, params: dict[str, nm.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    text = cfg.to_text().encode("utf-8")
    buf.write(struct.pack("<II", CKPT_VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(t.data.astype("<f8").tobytes())
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFileError(f"checkpoint truncated at offset {pos}")
        out = data[pos : pos + n]
        pos += n
        return out

    if (magic := take(4)) != CKPT_MAGIC:
        raise MagicError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}")
    version, n_text = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version} does not match supported version {CKPT_VERSION}")
    cfg = ModelConfig.from_text(take(n_text).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        name = take(n_name).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise TruncatedFileError(f"{len(data) - pos} trailing bytes after checkpoint payload")
    return cfg, params
