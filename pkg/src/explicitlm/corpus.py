"""Synthetic knowledge-graph corpus, word-level vocabulary and dataset splits.

Facts are functional (one object per subject/predicate pair), so object
prediction has a single right answer. Entities carry a type and every
relation has a fixed object type, which lets distractors be type-matched.

The frozen facts seed the frozen part of the memory bank and are the only
source of evaluation items; no training sentence contains a frozen fact.
"""

from __future__ import annotations

import uuid as uuidlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, GenerationError, VocabularyError

PAD, UNK, BOS = "<pad>", "<unk>", "<bos>"
SPECIALS = (PAD, UNK, BOS)
ENTITY_TYPES = ("person", "place", "thing")
TASKS = ("object_prediction", "relation_reasoning", "fact_verification")

_FILLER_LEXICON = {
    "det": ["the", "a"],
    "adj": ["red", "old", "small", "quiet", "bright", "green", "heavy", "warm"],
    "noun": ["cat", "dog", "river", "house", "book", "tree", "bird", "song", "road", "stone"],
    "verb": ["sees", "likes", "finds", "holds", "makes", "follows", "keeps"],
    "prep": ["near", "under", "behind", "over"],
}
_FILLER_TEMPLATES = (
    "det adj noun verb det noun",
    "det noun verb det adj noun",
    "det noun verb det noun prep det noun",
    "det adj noun prep det noun",
    "det noun verb det noun",
)
_PARAPHRASES = ("{s} {p} is {o}", "the {p} of {s} is {o}")


@dataclass(frozen=True)
class KnowledgeTriplet:
    subject: str
    predicate: str
    obj: str
    uuid: uuidlib.UUID

    @property
    def surface(self) -> str:
        return f"{self.subject} {self.predicate} {self.obj}"


@dataclass
class KnowledgeGraph:
    entity_types: dict[str, str]
    relation_ranges: dict[str, str]
    triplets: list[KnowledgeTriplet]

    @property
    def entities(self) -> list[str]:
        return list(self.entity_types)

    @property
    def relations(self) -> list[str]:
        return list(self.relation_ranges)

    def entities_of_type(self, kind: str) -> list[str]:
        return [e for e, t in self.entity_types.items() if t == kind]

    def fact_index(self) -> dict[tuple[str, str], str]:
        return {(t.subject, t.predicate): t.obj for t in self.triplets}


def _uuid(rng: np.random.Generator) -> uuidlib.UUID:
    return uuidlib.UUID(bytes=rng.bytes(16), version=4)


def generate_kg(seed: int, n_entities: int, n_relations: int, n_facts: int) -> KnowledgeGraph:
    if n_facts < 1:
        raise GenerationError(f"need at least one fact, got n_facts={n_facts}")
    if n_entities < 2 or n_relations < 1:
        raise GenerationError(f"need >= 2 entities and >= 1 relation, got {n_entities}, {n_relations}")
    if n_facts > n_entities * n_relations:
        raise GenerationError(
            f"n_facts={n_facts} exceeds the {n_entities * n_relations} subject/predicate pairs "
            f"available to functional relations"
        )
    rng = np.random.default_rng(seed)
    entity_types = {f"e{i}": ENTITY_TYPES[i % len(ENTITY_TYPES)] for i in range(n_entities)}
    relation_ranges = {f"r{j}": ENTITY_TYPES[int(rng.integers(len(ENTITY_TYPES)))] for j in range(n_relations)}
    by_type = {k: [e for e, t in entity_types.items() if t == k] for k in ENTITY_TYPES}
    for rel, kind in relation_ranges.items():
        if len(by_type[kind]) < 2:
            raise GenerationError(f"relation {rel} ranges over type {kind!r} with too few entities")

    pairs = rng.choice(n_entities * n_relations, size=n_facts, replace=False)
    triplets = []
    for flat in pairs:
        s, p = f"e{flat // n_relations}", f"r{flat % n_relations}"
        pool = [e for e in by_type[relation_ranges[p]] if e != s]
        o = pool[int(rng.integers(len(pool)))]
        triplets.append(KnowledgeTriplet(s, p, o, _uuid(rng)))
    return KnowledgeGraph(entity_types, relation_ranges, triplets)


# ------------------------------------------------------------------ vocab


class Vocab:
    def __init__(self, itos: Sequence[str]):
        self.itos = list(itos)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    def id(self, word: str) -> int:
        try:
            return self.stoi[word]
        except KeyError:
            raise VocabularyError(f"word {word!r} is not in the vocabulary") from None

    def encode(self, words: Iterable[str], strict: bool = True) -> list[int]:
        if strict:
            return [self.id(w) for w in words]
        return [self.stoi.get(w, self.unk_id) for w in words]

    def decode(self, ids: Iterable[int], skip_pad: bool = True) -> str:
        return " ".join(self.itos[int(i)] for i in ids if not (skip_pad and int(i) == self.pad_id))

    def save(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def normalize(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(corpus: Iterable[str], extra: Iterable[str] = ()) -> Vocab:
    """PAD=0, UNK=1, BOS=2, then words by descending frequency, ties lexical.

    ``extra`` adds answer-candidate tokens that may be absent from ``corpus``.
    """
    counts: Counter[str] = Counter()
    for line in corpus:
        counts.update(normalize(line))
    for word in extra:
        counts.setdefault(word, 0)
    for s in SPECIALS:
        counts.pop(s, None)
    if not counts:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocab(list(SPECIALS) + ordered)


# ------------------------------------------------------------------ splits


def filler_sentence(rng: np.random.Generator) -> str:
    template = _FILLER_TEMPLATES[int(rng.integers(len(_FILLER_TEMPLATES)))]
    words = []
    for slot in template.split():
        options = _FILLER_LEXICON[slot]
        words.append(options[int(rng.integers(len(options)))])
    return " ".join(words)


def filler_words() -> list[str]:
    return sorted({w for ws in _FILLER_LEXICON.values() for w in ws} | {"is", "of"})


@dataclass
class DatasetSplit:
    train_sequences: list[str]
    frozen: list[KnowledgeTriplet]
    updatable: list[KnowledgeTriplet]
    train_fact_uuids: list[uuidlib.UUID] = field(default_factory=list)

    @property
    def frozen_uuid_set(self) -> set[uuidlib.UUID]:
        return {t.uuid for t in self.frozen}


def make_splits(
    kg: KnowledgeGraph,
    rho: float,
    capacity: int,
    n_train: int,
    seed: int,
    filler_ratio: float = 1.0,
    paraphrase_rate: float = 0.25,
) -> DatasetSplit:
    """Choose the frozen facts and render the training corpus.

    ``updatable`` lists the remaining facts in the order they should seed the
    updatable bank partition: facts that appear in training first.
    """
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"freeze rate must lie in [0, 1], got {rho}")
    n_frozen = round(rho * capacity)
    if n_frozen == 0:
        raise ConfigError("freeze rate yields an empty frozen partition, so no evaluation items can be built")
    triplets = kg.triplets
    if n_frozen > len(triplets):
        raise ConfigError(f"rho*N = {n_frozen} frozen entries exceed the {len(triplets)} available facts")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(triplets))
    frozen = [triplets[i] for i in order[:n_frozen]]
    rest = [triplets[i] for i in order[n_frozen:]]

    n_fact = int(round(n_train / (1.0 + filler_ratio)))
    n_filler = n_train - n_fact
    if n_fact and not rest:
        raise ConfigError("no non-frozen facts left to render training sentences from")
    lines, seen = [], []
    for k in range(n_fact):
        t = rest[k % len(rest)]
        if k < len(rest):
            seen.append(t.uuid)
        if rng.random() < paraphrase_rate:
            template = _PARAPHRASES[int(rng.integers(len(_PARAPHRASES)))]
            lines.append(template.format(s=t.subject, p=t.predicate, o=t.obj))
        else:
            lines.append(t.surface)
    lines.extend(filler_sentence(rng) for _ in range(n_filler))
    lines = [lines[i] for i in rng.permutation(len(lines))]

    split = DatasetSplit(lines, frozen, rest, seen)
    leaks = disjointness_violations(split)
    if leaks:
        raise GenerationError(f"frozen fact leaked into training text: {leaks[0]!r}")
    return split


def disjointness_violations(split: DatasetSplit) -> list[str]:
    """Frozen surfaces found as contiguous word runs inside training text."""
    frozen = {tuple(normalize(t.surface)) for t in split.frozen}
    if not frozen:
        return []
    lengths = {len(f) for f in frozen}
    hits = []
    for line in split.train_sequences:
        words = normalize(line)
        for n in lengths:
            for i in range(len(words) - n + 1):
                if tuple(words[i : i + n]) in frozen:
                    hits.append(" ".join(words[i : i + n]))
    return hits


# -------------------------------------------------------------- eval items


@dataclass(frozen=True)
class EvalItem:
    task: str
    uuid: uuidlib.UUID
    sentences: tuple[str, ...]
    answer: int  # index of the gold sentence; for fact verification the 0/1 label
    item_id: int

    @property
    def label(self) -> int:
        return self.answer


def make_eval_items(
    kg: KnowledgeGraph,
    frozen: Sequence[KnowledgeTriplet],
    task: str,
    n_distractors: int = 5,
    seed: int = 0,
) -> list[EvalItem]:
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = np.random.default_rng([seed, TASKS.index(task)])
    items: list[EvalItem] = []
    facts = kg.fact_index()
    if task == "object_prediction":
        for t in frozen:
            kind = kg.relation_ranges[t.predicate]
            pool = [e for e in kg.entities_of_type(kind) if e not in (t.obj, t.subject)]
            if len(pool) < n_distractors:
                raise GenerationError(
                    f"only {len(pool)} entities of type {kind!r} for {n_distractors} distractors"
                )
            picks = [pool[i] for i in rng.choice(len(pool), size=n_distractors, replace=False)]
            cands = picks + [t.obj]
            perm = rng.permutation(len(cands))
            cands = [cands[i] for i in perm]
            sentences = tuple(f"{t.subject} {t.predicate} {o}" for o in cands)
            items.append(EvalItem(task, t.uuid, sentences, cands.index(t.obj), len(items)))
    elif task == "relation_reasoning":
        relations = kg.relations
        if len(relations) < 2:
            raise GenerationError("relation reasoning needs at least two predicates")
        linked: dict[tuple[str, str], int] = Counter((f.subject, f.obj) for f in kg.triplets)
        for t in frozen:
            if linked[(t.subject, t.obj)] > 1:
                continue  # two predicates link this pair; gold would be ambiguous
            sentences = tuple(f"{t.subject} {r} {t.obj}" for r in relations)
            items.append(EvalItem(task, t.uuid, sentences, relations.index(t.predicate), len(items)))
    else:
        for t in frozen:
            kind = kg.relation_ranges[t.predicate]
            pool = [e for e in kg.entities_of_type(kind) if e not in (t.obj, t.subject)]
            if not pool:
                raise GenerationError(f"no substitute object of type {kind!r} for {t.surface!r}")
            neg = pool[int(rng.integers(len(pool)))]
            assert facts.get((t.subject, t.predicate)) != neg
            items.append(EvalItem(task, t.uuid, (t.surface,), 1, len(items)))
            items.append(EvalItem(task, t.uuid, (f"{t.subject} {t.predicate} {neg}",), 0, len(items)))
    return items


def make_all_items(kg: KnowledgeGraph, frozen: Sequence[KnowledgeTriplet], seed: int, n_distractors: int = 5):
    return {task: make_eval_items(kg, frozen, task, n_distractors, seed) for task in TASKS}


# ------------------------------------------------------------------- files


def write_facts(path: Path, triplets: Iterable[KnowledgeTriplet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triplets:
            fh.write(f"{t.uuid}\t{t.subject}\t{t.predicate}\t{t.obj}\t{t.surface}\n")


def read_facts(path: Path) -> list[KnowledgeTriplet]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 5:
            raise GenerationError(f"{path}:{n}: expected 5 tab-separated fields, got {len(parts)}")
        u, s, p, o, _ = parts
        out.append(KnowledgeTriplet(s, p, o, uuidlib.UUID(u)))
    return out


def write_schema(path: Path, kg: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e, t in kg.entity_types.items():
            fh.write(f"entity\t{e}\t{t}\n")
        for r, t in kg.relation_ranges.items():
            fh.write(f"relation\t{r}\t{t}\n")


def read_schema(path: Path) -> tuple[dict[str, str], dict[str, str]]:
    ents, rels = {}, {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        kind, name, t = line.split("\t")
        (ents if kind == "entity" else rels)[name] = t
    return ents, rels


def write_manifest(path: Path, header: dict, split: DatasetSplit) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in header.items():
            fh.write(f"{k} = {v}\n")
        fh.write("[frozen]\n")
        fh.writelines(f"{t.uuid}\n" for t in split.frozen)
        fh.write("[updatable]\n")
        fh.writelines(f"{t.uuid}\n" for t in split.updatable)
        fh.write("[train_facts]\n")
        fh.writelines(f"{u}\n" for u in split.train_fact_uuids)


def read_manifest(path: Path) -> tuple[dict[str, str], dict[str, list[uuidlib.UUID]]]:
    header: dict[str, str] = {}
    sections: dict[str, list[uuidlib.UUID]] = {}
    current = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
        elif line.strip():
            sections[current].append(uuidlib.UUID(line.strip()))
    return header, sections


def write_items(path: Path, items: Iterable[EvalItem]) -> None:
    """One item per line: ``task  item_id  uuid  answer  sentence...`` (tab-separated)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it in items:
            fh.write("\t".join([it.task, str(it.item_id), str(it.uuid), str(it.answer), *it.sentences]) + "\n")


def read_items(path: Path) -> dict[str, list[EvalItem]]:
    out: dict[str, list[EvalItem]] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) < 5 or parts[0] not in TASKS:
            raise GenerationError(f"{path}:{n}: malformed evaluation item")
        task, item_id, u, answer, *sentences = parts
        out.setdefault(task, []).append(EvalItem(task, uuidlib.UUID(u), tuple(sentences), int(answer), int(item_id)))
    return out
