"""Desk-scale experiment runs: toy data, training loop, paired comparisons.

The toy preset below differs from the library defaults in three places,
all chosen so retrieval survives training at this scale: a small relevance
weight, gates that start half open, and no requantisation of updatable
entries during the run.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import corpus as C
from .bank import build_bank
from .corpus import KnowledgeGraph, Vocab
from .evaluation import (
    HitRates,
    default_intervention_layers,
    eval_object_prediction,
    relation_hit_rates,
    replace_retain_experiment,
    EVALUATORS,
)
from .losses import LossReport
from .model import ExplicitLM, ModelConfig, encode_batch

log = logging.getLogger(__name__)

TOY_OVERRIDES = {
    "lambda_sim": 0.001,
    "gate_init": 4.0,
    "requantize_every": 1_000_000,
    "learning_rate": 0.5,
}


def toy_config(vocab_size: int, **changes) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, **{**TOY_OVERRIDES, **changes})


@dataclass
class ToyData:
    kg: KnowledgeGraph
    split: C.DatasetSplit
    vocab: Vocab
    items: dict[str, list[C.EvalItem]]
    validation: list[C.EvalItem]

    @property
    def curated(self) -> list[tuple]:
        return [(t.uuid, t.surface) for t in self.split.frozen]

    @property
    def updatable(self) -> list[tuple]:
        return [(t.uuid, t.surface) for t in self.split.updatable]


def make_toy_data(
    seed: int,
    n_train: int,
    n_entities: int = 100,
    n_relations: int = 20,
    n_facts: int = 2000,
    capacity: int = 1024,
    rho: float = 0.2,
    n_validation: int = 200,
) -> ToyData:
    kg = C.generate_kg(seed, n_entities, n_relations, n_facts)
    split = C.make_splits(kg, rho, capacity, n_train, seed)
    vocab = C.build_vocab(split.train_sequences + [t.surface for t in kg.triplets], C.filler_words())
    items = C.make_all_items(kg, split.frozen, seed)
    # Layer selection looks at updatable facts so the test items stay unseen.
    n_updatable = capacity - len(split.frozen)
    val_facts = split.updatable[: min(n_validation, n_updatable)]
    validation = C.make_eval_items(kg, val_facts, "relation_reasoning", seed=seed + 1)
    return ToyData(kg, split, vocab, items, validation)


def build_model(data: ToyData, cfg: ModelConfig, seed: int) -> ExplicitLM:
    bank = None
    if cfg.memory_enabled:
        bank = build_bank(data.curated, data.updatable, data.vocab, cfg.capacity, cfg.entry_length, cfg.rho,
                          np.random.default_rng(seed))
    return ExplicitLM(cfg, bank)


def train(
    model: ExplicitLM,
    sentences: Sequence[str],
    vocab: Vocab,
    steps: int,
    batch_size: int = 16,
    seed: int = 0,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> list[LossReport]:
    """Plain minibatch loop; batches are trimmed to their longest sentence."""
    data = encode_batch(vocab, sentences, model.cfg.max_seq_len)
    rng = np.random.default_rng([seed, 2])
    reports = []
    for step in range(steps):
        batch = data[rng.choice(len(data), batch_size)]
        width = int((batch != vocab.pad_id).sum(axis=1).max())
        rep = model.train_step(batch[:, :width])
        reports.append(rep)
        if on_step is not None:
            on_step(step, rep)
    return reports


@dataclass
class RunResult:
    seed: int
    n_train: int
    memory: bool
    accuracy: dict[str, float]
    seconds: float
    hit_rates: HitRates | None = None
    intervention: dict = field(default_factory=dict)
    layers: list[int] = field(default_factory=list)


def run_one(seed: int, n_train: int, memory: bool, steps: int, batch_size: int = 16,
            data: ToyData | None = None, **overrides) -> RunResult:
    data = make_toy_data(seed, n_train) if data is None else data
    cfg = toy_config(len(data.vocab), memory_enabled=memory, seed=seed, **overrides)
    start = time.perf_counter()
    model = build_model(data, cfg, seed)
    train(model, data.split.train_sequences, data.vocab, steps, batch_size, seed)
    acc = {task: EVALUATORS[task](model, data.vocab, items) for task, items in data.items.items()}
    result = RunResult(seed, n_train, memory, acc, 0.0)
    if memory:
        result.hit_rates = relation_hit_rates(model, data.vocab, data.items["relation_reasoning"])
        result.layers = default_intervention_layers(model, data.vocab, data.validation)
        result.intervention = replace_retain_experiment(model, data.vocab, data.items, result.layers)
    result.seconds = time.perf_counter() - start
    log.info("seed=%d n_train=%d memory=%s OP=%.3f (%.0fs)", seed, n_train, memory,
             acc["object_prediction"], result.seconds)
    return result


def run_comparison(seeds=(0, 1, 2), volumes=(500, 2000), steps: int = 1500, batch_size: int = 16,
                   **overrides) -> list[RunResult]:
    """Memory model and parameter-matched baseline on identical data and seeds."""
    results = []
    for n_train in volumes:
        for seed in seeds:
            data = make_toy_data(seed, n_train)
            for memory in (True, False):
                results.append(run_one(seed, n_train, memory, steps, batch_size, data, **overrides))
    return results


def op_gap(results: Sequence[RunResult], n_train: int) -> float:
    """Mean memory-minus-baseline Object Prediction accuracy at one volume."""
    def mean(memory):
        return float(np.mean([r.accuracy["object_prediction"] for r in results
                              if r.n_train == n_train and r.memory == memory]))
    return mean(True) - mean(False)
