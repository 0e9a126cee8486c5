"""Knowledge-task evaluators, memory hit-rate analysis and the oracle intervention.

Every evaluator scores sentences by their total log-likelihood under the
model (evaluation mode, so retrieval is noise-free and deterministic).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nm
from .corpus import TASKS, EvalItem, Vocab
from .errors import ContractError, OracleError
from .model import ExplicitLM, encode_batch

MODES = ("retain", "replace")


@dataclass(frozen=True)
class InterventionSpec:
    layers: frozenset[int]
    mode: str = "replace"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"intervention mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "layers", frozenset(int(i) for i in self.layers))

    def check(self, n_layers: int) -> None:
        bad = [i for i in self.layers if not 0 <= i < n_layers]
        if bad:
            raise ContractError(f"intervention layers {sorted(bad)} outside [0, {n_layers})")


@dataclass
class HitRates:
    layer_hits: np.ndarray  # (n_items, n_layers) bool
    correct: np.ndarray  # (n_items,) bool

    @property
    def sample_hits(self) -> np.ndarray:
        return self.layer_hits.any(axis=1)

    def _rate(self, rows: np.ndarray) -> float:
        return float(self.sample_hits[rows].mean()) if rows.any() else float("nan")

    @property
    def overall(self) -> float:
        return self._rate(np.ones(len(self.correct), dtype=bool))

    @property
    def overall_correct(self) -> float:
        return self._rate(self.correct)

    @property
    def overall_incorrect(self) -> float:
        return self._rate(~self.correct)

    def per_layer(self, which: str = "all") -> np.ndarray:
        rows = {"all": np.ones(len(self.correct), dtype=bool), "correct": self.correct, "incorrect": ~self.correct}[which]
        if not rows.any():
            return np.full(self.layer_hits.shape[1], np.nan)
        return self.layer_hits[rows].mean(axis=0)

    @property
    def n_correct(self) -> int:
        return int(self.correct.sum())

    @property
    def n_incorrect(self) -> int:
        return int((~self.correct).sum())


@dataclass
class EvalReport:
    accuracy: dict[str, dict[str, float]] = field(default_factory=dict)  # task -> mode -> acc
    hit_rates: HitRates | None = None
    n_items: dict[str, int] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, str, float]]:
        out = []
        for task, modes in self.accuracy.items():
            for mode, acc in modes.items():
                out.append((task, mode, "accuracy", acc))
            out.append((task, "all", "n_items", float(self.n_items.get(task, 0))))
        if self.hit_rates is not None:
            h = self.hit_rates
            out += [
                ("relation_reasoning", "retain", "hit_rate", h.overall),
                ("relation_reasoning", "retain", "hit_rate_correct", h.overall_correct),
                ("relation_reasoning", "retain", "hit_rate_incorrect", h.overall_incorrect),
            ]
            for i, (a, c, w) in enumerate(zip(h.per_layer("all"), h.per_layer("correct"), h.per_layer("incorrect"))):
                out += [
                    ("relation_reasoning", "retain", f"hit_rate_layer{i}", float(a)),
                    ("relation_reasoning", "retain", f"hit_rate_layer{i}_correct", float(c)),
                    ("relation_reasoning", "retain", f"hit_rate_layer{i}_incorrect", float(w)),
                ]
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "mode", "metric", "value"])
            for row in self.rows():
                w.writerow([row[0], row[1], row[2], f"{row[3]:.6f}"])

    def table(self) -> str:
        modes = sorted({m for v in self.accuracy.values() for m in v}, key=lambda m: (m != "retain", m))
        lines = [f"{'task':<20}" + "".join(f"{m:>10}" for m in modes) + f"{'items':>8}"]
        for task, accs in self.accuracy.items():
            cells = "".join(f"{accs[m] * 100:>9.2f}%" if m in accs else f"{'-':>10}" for m in modes)
            lines.append(f"{task:<20}{cells}{self.n_items.get(task, 0):>8}")
        if self.hit_rates is not None:
            h = self.hit_rates
            lines.append(
                f"hit rate (relation reasoning): overall {h.overall:.3f}, "
                f"correct {h.overall_correct:.3f} (n={h.n_correct}), incorrect {h.overall_incorrect:.3f} (n={h.n_incorrect})"
            )
            lines.append("per layer: " + " ".join(
                f"L{i}={c:.2f}/{w:.2f}" for i, (c, w) in enumerate(zip(h.per_layer("correct"), h.per_layer("incorrect")))
            ))
        return "\n".join(lines)


# ---------------------------------------------------------------- scoring


def _answer_positions(batch: np.ndarray, pad_id: int) -> np.ndarray:
    """Input position that predicts each sentence's last token."""
    return (batch != pad_id).sum(axis=1) - 2


def score_sentences(
    model: ExplicitLM,
    vocab: Vocab,
    sentences: Sequence[str],
    force: dict[int, np.ndarray] | None = None,
    batch_size: int = 512,
    return_selections: bool = False,
):
    """Total log-likelihood of each sentence (all words given BOS).

    ``force`` maps layer index to one bank index per sentence (-1 = no
    intervention). With ``return_selections`` also returns the (S, n_layers)
    bank index picked at each sentence's answer position.
    """
    enc = encode_batch(vocab, sentences)
    scores = np.empty(len(sentences))
    picks = np.full((len(sentences), model.cfg.n_layers), -1, dtype=np.int64)
    with nm.no_grad():
        for lo in range(0, len(sentences), batch_size):
            chunk = enc[lo : lo + batch_size]
            width = int((chunk != vocab.pad_id).sum(axis=1).max())
            chunk = chunk[:, :width]
            inputs, targets = chunk[:, :-1], chunk[:, 1:]
            sub = None if force is None else {i: np.asarray(f)[lo : lo + batch_size] for i, f in force.items()}
            trace = model.forward(inputs, train_mode=False, force=sub)
            logits = trace.logits.data
            logp = logits - logits.max(-1, keepdims=True)
            logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
            tok = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
            scores[lo : lo + len(chunk)] = (tok * (targets != vocab.pad_id)).sum(axis=1)
            if return_selections and trace.per_layer:
                at = _answer_positions(chunk, vocab.pad_id)
                rows = np.arange(len(chunk))
                for i, sel in enumerate(trace.per_layer):
                    picks[lo : lo + len(chunk), i] = sel.grid(inputs.shape)[rows, at]
    return (scores, picks) if return_selections else scores


def _gold_force(model: ExplicitLM, items: Sequence[EvalItem], per_item: int, layers: Iterable[int]):
    if model.bank is None:
        raise OracleError("replace mode needs a memory bank")
    gold = []
    for it in items:
        try:
            gold.append(model.bank.index_of(it.uuid))
        except KeyError:
            raise OracleError(f"gold entry {it.uuid} for item {it.item_id} is absent from the bank") from None
    rows = np.repeat(np.asarray(gold, dtype=np.int64), per_item)
    return {i: rows for i in layers}


def _check(items: Sequence[EvalItem], task: str) -> None:
    if not items:
        raise ContractError(f"no {task} items to evaluate")
    if any(it.task != task for it in items):
        raise ContractError(f"item set mixes tasks; expected only {task}")


def _multiple_choice(model, vocab, items, task, spec: InterventionSpec | None, return_selections=False):
    _check(items, task)
    width = len(items[0].sentences)
    if any(len(it.sentences) != width for it in items):
        raise ContractError(f"{task} items must all have {width} candidates")
    sentences = [s for it in items for s in it.sentences]
    force = None
    if spec is not None and spec.mode == "replace" and spec.layers:
        spec.check(model.cfg.n_layers)
        force = _gold_force(model, items, width, spec.layers)
    out = score_sentences(model, vocab, sentences, force, return_selections=return_selections)
    scores, picks = out if return_selections else (out, None)
    scores = scores.reshape(len(items), width)
    best = scores.max(axis=1, keepdims=True)
    unique = (scores == best).sum(axis=1) == 1
    answers = np.array([it.answer for it in items])
    correct = unique & (scores.argmax(axis=1) == answers)
    if return_selections:
        gold_picks = picks.reshape(len(items), width, -1)[np.arange(len(items)), answers]
        return correct, gold_picks
    return correct


def eval_object_prediction(model, vocab, items, spec: InterventionSpec | None = None) -> float:
    return float(_multiple_choice(model, vocab, items, "object_prediction", spec).mean())


def eval_relation_reasoning(model, vocab, items, spec: InterventionSpec | None = None) -> float:
    return float(_multiple_choice(model, vocab, items, "relation_reasoning", spec).mean())


def eval_fact_verification(model, vocab, items, spec: InterventionSpec | None = None) -> float:
    """Predict "true" for sentences scoring strictly above the batch median."""
    _check(items, "fact_verification")
    labels = np.array([it.label for it in items])
    if labels.all() or not labels.any():
        raise ContractError("fact verification items must contain both classes")
    force = None
    if spec is not None and spec.mode == "replace" and spec.layers:
        spec.check(model.cfg.n_layers)
        force = _gold_force(model, items, 1, spec.layers)
    scores = score_sentences(model, vocab, [it.sentences[0] for it in items], force)
    predicted = scores > np.median(scores)
    return float((predicted == labels.astype(bool)).mean())


EVALUATORS = {
    "object_prediction": eval_object_prediction,
    "relation_reasoning": eval_relation_reasoning,
    "fact_verification": eval_fact_verification,
}


def hit_rate_analysis(correct: np.ndarray, picks: np.ndarray, items: Sequence[EvalItem], bank) -> HitRates:
    """Layer hit = picked entry's uuid equals the item's gold uuid."""
    correct = np.asarray(correct, dtype=bool)
    picks = np.asarray(picks)
    if picks.shape[0] != len(items) or correct.shape[0] != len(items):
        raise ContractError("need one trace row and one correctness flag per item")
    if (picks < 0).any():
        raise ContractError("trace is missing a selection for some item/layer")
    uuids = bank.uuids
    hits = np.array([[uuids[j] == it.uuid for j in row] for row, it in zip(picks, items)], dtype=bool)
    return HitRates(hits.reshape(len(items), -1), correct)


def relation_hit_rates(model, vocab, items) -> HitRates:
    correct, picks = _multiple_choice(model, vocab, items, "relation_reasoning", None, return_selections=True)
    return hit_rate_analysis(correct, picks, items, model.bank)


def default_intervention_layers(model, vocab, items, n: int = 2) -> list[int]:
    """The ``n`` layers with the highest hit rate on the given (validation) items."""
    rates = relation_hit_rates(model, vocab, items).per_layer("all")
    order = sorted(range(len(rates)), key=lambda i: (-rates[i], i))
    return sorted(order[:n])


def replace_retain_experiment(model, vocab, items_by_task: dict[str, Sequence[EvalItem]], layers) -> dict:
    """Paired accuracies per task: {task: {"retain": a, "replace": b, "delta": b - a}}."""
    out = {}
    replace = InterventionSpec(frozenset(layers), "replace")
    for task, items in items_by_task.items():
        fn = EVALUATORS[task]
        a = fn(model, vocab, items, None)
        b = fn(model, vocab, items, replace)
        out[task] = {"retain": a, "replace": b, "delta": b - a}
    return out


def evaluate(model, vocab, items_by_task, layers=None, hit_rates: bool = True) -> EvalReport:
    report = EvalReport()
    for task in TASKS:
        if task not in items_by_task:
            continue
        items = items_by_task[task]
        report.n_items[task] = len(items)
        report.accuracy[task] = {"retain": EVALUATORS[task](model, vocab, items, None)}
        if layers and model.cfg.memory_enabled:
            spec = InterventionSpec(frozenset(layers), "replace")
            report.accuracy[task]["replace"] = EVALUATORS[task](model, vocab, items, spec)
    if hit_rates and model.cfg.memory_enabled and "relation_reasoning" in items_by_task:
        report.hit_rates = relation_hit_rates(model, vocab, items_by_task["relation_reasoning"])
    return report
