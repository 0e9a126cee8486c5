"""Command-line entry point: ``explicitlm {gen-data,train,eval,intervene,inspect}``.

Settings resolve as built-in defaults < ``--config`` file (``key = value``
lines) < explicit flags. Exit codes: 0 success, 2 usage error, 3 data
error, 4 divergence. ``XLM_LOG=debug|info`` raises log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import corpus as C
from .bank import build_bank, detokenize_entry, load_bank, save_bank
from .errors import (
    BoundsError,
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    ExplicitLMError,
    GenerationError,
    OracleError,
    PersistenceError,
    VocabularyError,
)
from .evaluation import EVALUATORS, default_intervention_layers, evaluate, replace_retain_experiment
from .experiments import TOY_OVERRIDES, make_toy_data, train
from .model import ExplicitLM, ModelConfig, parse_overrides

log = logging.getLogger("explicitlm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

FACTS, SCHEMA, MANIFEST, CORPUS, VOCAB = "facts.tsv", "schema.tsv", "manifest.txt", "corpus.txt", "vocab.txt"
ITEMS, VALIDATION = "items.tsv", "validation.tsv"
CHECKPOINT, BANK, TRAIN_LOG = "model.xlmc", "bank.xlmb", "train_log.csv"

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}

# run-level settings per command; every one can also come from --config
RUN_DEFAULTS = {
    "gen-data": {"seed": 0, "out": "data", "entities": 100, "relations": 20, "facts": 2000, "samples": 500,
                 "capacity": 1024, "freeze_rate": 0.2, "validation": 200},
    "train": {"seed": 0, "out": "run", "data": "data", "steps": 1500, "batch_size": 16, "preset": "none"},
    "eval": {"seed": 0, "out": None, "data": "data", "run": "run", "layers": None},
    "intervene": {"seed": 0, "out": None, "data": "data", "run": "run", "layers": None},
    "inspect": {"seed": 0, "out": None, "bank": "run/bank.xlmb", "data": "data", "start": 0, "end": None},
}
# train flags that write straight into ModelConfig
MODEL_FLAGS = {"freeze_rate": "rho", "candidates": "candidate_count", "temp": "temperature",
               "lambda_sim": "lambda_sim", "lambda_div": "lambda_div", "lr": "learning_rate"}


class UsageError(ExplicitLMError):
    pass


# ------------------------------------------------------------------ parser


def _shared(p: argparse.ArgumentParser, cmd: str) -> None:
    d = RUN_DEFAULTS[cmd]
    p.add_argument("--seed", type=int, help=f"random seed (default: {d['seed']})")
    p.add_argument("--config", type=Path, help="file of `key = value` lines overriding defaults (default: none)")
    p.add_argument("--out", help=f"output path (default: {d['out']})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="explicitlm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    cfg = ModelConfig()

    g = sub.add_parser("gen-data", help="generate a synthetic knowledge graph, corpus and evaluation items")
    _shared(g, "gen-data")
    d = RUN_DEFAULTS["gen-data"]
    g.add_argument("--entities", type=int, help=f"entity count (default: {d['entities']})")
    g.add_argument("--relations", type=int, help=f"relation count (default: {d['relations']})")
    g.add_argument("--facts", type=int, help=f"fact count (default: {d['facts']})")
    g.add_argument("--samples", type=int, help=f"training sentences, half of them filler (default: {d['samples']})")
    g.add_argument("--capacity", type=int, help=f"bank capacity N the split is sized for (default: {d['capacity']})")
    g.add_argument("--freeze-rate", type=float, help=f"frozen fraction rho of the bank (default: {d['freeze_rate']})")
    g.add_argument("--validation", type=int, help=f"validation items for layer selection (default: {d['validation']})")

    t = sub.add_parser("train", help="train a memory model (or the baseline with --no-memory)")
    _shared(t, "train")
    d = RUN_DEFAULTS["train"]
    t.add_argument("--data", help=f"directory written by gen-data (default: {d['data']})")
    t.add_argument("--steps", type=int, help=f"optimizer steps (default: {d['steps']})")
    t.add_argument("--batch-size", type=int, help=f"sentences per step (default: {d['batch_size']})")
    t.add_argument("--preset", choices=["none", "toy"], help=f"named config overrides (default: {d['preset']})")
    t.add_argument("--freeze-rate", type=float, help=f"frozen fraction rho of the bank (default: {cfg.rho})")
    t.add_argument("--candidates", type=int, help=f"stage-1 candidate count (default: {cfg.candidate_count})")
    t.add_argument("--temp", type=float, help=f"Gumbel-softmax temperature (default: {cfg.temperature})")
    t.add_argument("--lambda-sim", type=float, help=f"relevance loss weight (default: {cfg.lambda_sim})")
    t.add_argument("--lambda-div", type=float, help=f"diversity loss weight (default: {cfg.lambda_div})")
    t.add_argument("--lr", type=float, help=f"SGD learning rate (default: {cfg.learning_rate})")
    t.add_argument("--no-memory", action="store_true", default=None,
                   help="train the parameter-matched memory-free baseline (default: off)")

    for name, text in (("eval", "score the three knowledge tasks"), ("intervene", "compare retain and replace modes")):
        e = sub.add_parser(name, help=text)
        _shared(e, name)
        e.add_argument("--data", help="directory written by gen-data (default: data)")
        e.add_argument("--run", help="directory written by train (default: run)")
        auto = "none" if name == "eval" else "the two best layers on validation items"
        e.add_argument("--layers", help=f"comma-separated intervention layers, '' for none (default: {auto})")

    i = sub.add_parser("inspect", help="print bank entries as `index frozen? uuid text`")
    _shared(i, "inspect")
    d = RUN_DEFAULTS["inspect"]
    i.add_argument("--bank", help=f"bank file (default: {d['bank']})")
    i.add_argument("--data", help=f"directory holding the vocabulary (default: {d['data']})")
    i.add_argument("--start", type=int, help="first index (default: 0)")
    i.add_argument("--end", type=int, help="one past the last index (default: bank capacity)")
    return parser


# ---------------------------------------------------------------- settings


def resolve(args: argparse.Namespace) -> tuple[dict, dict]:
    """(run settings, ModelConfig overrides) after defaults < config file < flags."""
    cmd = args.command
    run = dict(RUN_DEFAULTS[cmd])
    model: dict = {}
    if args.config is not None:
        try:
            lines = args.config.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        for n, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            key = key.replace("-", "_")
            if not sep:
                raise ConfigError(f"{args.config}:{n}: expected key = value")
            if key in run:
                run[key] = _cast(run[key], value, key)
            elif cmd == "train" and (key in _MODEL_KEYS or key in MODEL_FLAGS):
                model.update(parse_overrides([f"{MODEL_FLAGS.get(key, key)}={value}"]))
            else:
                raise ConfigError(f"{args.config}:{n}: unknown key {key!r} for {cmd}")
    for key, value in vars(args).items():
        if value is None or key in ("command", "config"):
            continue
        if key in run:
            run[key] = value
        elif key in MODEL_FLAGS:
            model[MODEL_FLAGS[key]] = value
        elif key == "no_memory":
            model["memory_enabled"] = not value
    return run, model


def _cast(default, value: str, key: str):
    if default is None or isinstance(default, str):
        return value
    try:
        return type(default)(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from None


def _layers(text: str | None, n_layers: int) -> list[int] | None:
    if text is None:
        return None
    try:
        layers = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise UsageError(f"--layers expects comma-separated integers, got {text!r}") from None
    bad = [i for i in layers if not 0 <= i < n_layers]
    if bad:
        raise UsageError(f"layers {bad} outside [0, {n_layers})")
    return layers


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input file {path}")
    return path


# ---------------------------------------------------------------- commands


def cmd_gen_data(run: dict, model: dict) -> int:
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = make_toy_data(run["seed"], run["samples"], run["entities"], run["relations"], run["facts"],
                         run["capacity"], run["freeze_rate"], run["validation"])
    items = [it for task in C.TASKS for it in data.items[task]]
    C.write_facts(out / FACTS, data.kg.triplets)
    C.write_schema(out / SCHEMA, data.kg)
    (out / CORPUS).write_text("".join(f"{s}\n" for s in data.split.train_sequences), encoding="utf-8")
    data.vocab.save(out / VOCAB)
    C.write_items(out / ITEMS, items)
    C.write_items(out / VALIDATION, data.validation)
    header = {k: run[k] for k in ("seed", "entities", "relations", "facts", "samples", "capacity", "freeze_rate")}
    header.update(n_frozen=len(data.split.frozen), n_updatable=len(data.split.updatable),
                  n_corpus=len(data.split.train_sequences), n_vocab=len(data.vocab), n_items=len(items),
                  n_validation=len(data.validation))
    C.write_manifest(out / MANIFEST, header, data.split)
    print(f"wrote {len(data.kg.triplets)} facts, {len(data.split.train_sequences)} sentences, "
          f"{len(items)} items to {out}")
    return EXIT_OK


def _load_data(root: Path):
    triplets = {t.uuid: t for t in C.read_facts(_need(root / FACTS))}
    _, sections = C.read_manifest(_need(root / MANIFEST))
    missing = [u for key in ("frozen", "updatable") for u in sections.get(key, []) if u not in triplets]
    if missing:
        raise GenerationError(f"manifest lists {len(missing)} uuids absent from {FACTS}, e.g. {missing[0]}")
    frozen = [triplets[u] for u in sections.get("frozen", [])]
    updatable = [triplets[u] for u in sections.get("updatable", [])]
    corpus = _need(root / CORPUS).read_text(encoding="utf-8").splitlines()
    return frozen, updatable, corpus, C.Vocab.load(_need(root / VOCAB))


def cmd_train(run: dict, model_overrides: dict) -> int:
    frozen, updatable, corpus, vocab = _load_data(Path(run["data"]))
    base = TOY_OVERRIDES if run["preset"] == "toy" else {}
    cfg = ModelConfig(**{**base, "vocab_size": len(vocab), "seed": run["seed"], **model_overrides})
    bank = None
    if cfg.memory_enabled:
        # when rho*N asks for more frozen rows than the split holds, extra updatable facts are frozen too
        need = round(cfg.rho * cfg.capacity)
        curated = frozen + updatable[: max(0, need - len(frozen))]
        rest = updatable[max(0, need - len(frozen)) :]
        bank = build_bank([(t.uuid, t.surface) for t in curated], [(t.uuid, t.surface) for t in rest], vocab,
                          cfg.capacity, cfg.entry_length, cfg.rho, np.random.default_rng(run["seed"]))
    model = ExplicitLM(cfg, bank)
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    log.info("training %s model: %d parameters, %d steps", "memory" if cfg.memory_enabled else "baseline",
             model.n_params(), run["steps"])

    with open(out / TRAIN_LOG, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "l_ce", "l_sim", "l_div", "l_total"])

        def on_step(step, rep):
            writer.writerow([step, *(f"{v:.8f}" for v in (rep.l_ce, rep.l_sim, rep.l_div, rep.l_total))])
            log.debug("step %d l_ce=%.4f l_total=%.4f", step, rep.l_ce, rep.l_total)

        reports = train(model, corpus, vocab, run["steps"], run["batch_size"], run["seed"], on_step)
    model.save(out / CHECKPOINT)
    if cfg.memory_enabled:
        save_bank(model.bank, model.ema, out / BANK)
    if reports:
        print(f"trained {len(reports)} steps: l_ce {reports[0].l_ce:.4f} -> {reports[-1].l_ce:.4f}; wrote {out}")
    return EXIT_OK


def _load_run(run: dict):
    root, data = Path(run["run"]), Path(run["data"])
    bank = ema = None
    if (root / BANK).exists():
        bank, ema = load_bank(root / BANK)
    model = ExplicitLM.load(_need(root / CHECKPOINT), bank, ema)
    vocab = C.Vocab.load(_need(data / VOCAB))
    if len(vocab) != model.cfg.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} words but the checkpoint expects {model.cfg.vocab_size}")
    items = C.read_items(_need(data / ITEMS))
    return model, vocab, items


def cmd_eval(run: dict, _model: dict) -> int:
    model, vocab, items = _load_run(run)
    layers = _layers(run["layers"], model.cfg.n_layers)
    report = evaluate(model, vocab, items, layers=layers)
    print(report.table())
    if run["out"]:
        out = Path(run["out"])
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "report.csv")
    return EXIT_OK


def cmd_intervene(run: dict, _model: dict) -> int:
    model, vocab, items = _load_run(run)
    if not model.cfg.memory_enabled:
        raise OracleError("intervention needs a memory model")
    layers = _layers(run["layers"], model.cfg.n_layers)
    if layers is None:
        validation = C.read_items(_need(Path(run["data"]) / VALIDATION)).get("relation_reasoning", [])
        layers = default_intervention_layers(model, vocab, validation)
        log.info("auto-selected intervention layers %s", layers)
    result = replace_retain_experiment(model, vocab, {t: items[t] for t in EVALUATORS if t in items}, layers)
    print(f"intervention layers: {','.join(map(str, layers)) or 'none'}")
    print(f"{'task':<20}{'retain':>10}{'replace':>10}{'delta':>10}")
    for task, r in result.items():
        print(f"{task:<20}{r['retain'] * 100:>9.2f}%{r['replace'] * 100:>9.2f}%{r['delta'] * 100:>+9.2f}%")
    if run["out"]:
        out = Path(run["out"])
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "intervene.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "mode", "metric", "value"])
            for task, r in result.items():
                for mode in ("retain", "replace", "delta"):
                    w.writerow([task, mode, "accuracy", f"{r[mode]:.6f}"])
    return EXIT_OK


def cmd_inspect(run: dict, _model: dict) -> int:
    bank, _ = load_bank(_need(Path(run["bank"])))
    vocab = C.Vocab.load(_need(Path(run["data"]) / VOCAB))
    start = run["start"]
    end = bank.capacity if run["end"] is None else run["end"]
    if not 0 <= start <= end <= bank.capacity:
        raise BoundsError(f"range {start}..{end} outside the bank's 0..{bank.capacity}")
    lines = []
    for i in range(start, end):
        flag = "frozen" if bank.freeze_mask[i] else "update"
        lines.append(f"{i}\t{flag}\t{bank.uuids[i]}\t{detokenize_entry(bank.entries[i], vocab)}\n")
    sys.stdout.write("".join(lines))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "intervene": cmd_intervene,
            "inspect": cmd_inspect}


def _setup_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(os.environ.get("XLM_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        run, model = resolve(args)
        return COMMANDS[args.command](run, model)
    except DivergenceError as exc:
        print(f"error: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, BoundsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, PersistenceError, GenerationError, VocabularyError, OracleError, ContractError,
            DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
