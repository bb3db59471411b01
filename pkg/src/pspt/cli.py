"""Command-line entry point: init-model, pretrain, train, rerank, eval.

Every command is driven by a JSON config file validated closed-world
(unknown keys abort), so reruns with the same config and seed reproduce
their outputs byte for byte. Selected keys can be overridden by flags.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

from .adapter import init_pspt_params, load_params, save_params
from .checkpoint import load_model, save_model
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InputError,
    NumericError,
    ParseError,
    PsptError,
    VocabularyError,
)
from .evaluation import (
    RetrievalRun,
    RunEntry,
    evaluate,
    load_dataset,
    read_run_file,
    write_run_file,
)
from .model import MicroLM, ModelConfig, Vocabulary, continue_pretraining, pretrain_micro_lm
from .scoring import Candidate, make_pspt_scorer, make_upr_scorer, rerank_with_scores
from .training import TrainConfig, build_instances, train, write_train_log

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS: dict = {
    "seed": 0,
    "workers": 1,
    "model": {
        "dim": 64,
        "n_layers": 2,
        "n_heads": 4,
        "max_seq_len": 256,
        "ffn_mult": 4,
        "vocab_cap": 2048,
        "pretrain_steps": 0,
        "pretrain_batch_size": 8,
        "pretrain_lr": 1e-3,
        "pretrain_pack_len": 90,
    },
    "adapter": {
        "soft_prompt_len": 50,
        "rank": 1,
        "alpha": 16.0,
        "hard_prompt": "please generate question for this passage",
        "literal_concat": False,
    },
    "scoring": {
        "score_mode": "sum",
        "upr_prompt": "Please generate question for this passage:",
        "upr_example_question": None,
        "upr_example_passage": None,
    },
    "train": {
        "batch_size": 4,
        "in_batch_negatives": 4,
        "epochs": 20,
        "lr_soft_prompt": 3e-2,
        "lr_adapter": 3e-5,
        "early_stop_patience": 3,
        "train_sample_size": 320,
        "dev_fraction": 0.1,
        "grad_clip": 1.0,
        "point_weight": 1.0,
        "pair_weight": 1.0,
    },
    "eval": {
        "k_list": [5, 10],
        "capped_recall": False,
        "baseline_tag": None,
    },
    "paths": {
        "dataset": None,
        "model_checkpoint": "model.ckpt",
        "params_checkpoint": "pspt.ckpt",
        "train_log": "train_log.jsonl",
        "output_dir": ".",
    },
}


def _merge(defaults: dict, overrides: dict, path: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    unknown = []
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            unknown.append(where)
            continue
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            merged[key] = _merge(defaults[key], value, where)
        else:
            merged[key] = value
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return merged


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return _merge(DEFAULTS, raw)


def _require_dataset(config: dict, args=None):
    path = getattr(args, "dataset", None) or config["paths"]["dataset"]
    if not path:
        raise ConfigError("paths.dataset is required for this command")
    return load_dataset(path)


def _pretraining_corpus(dataset, vocab, config: dict) -> list[list[int]]:
    """Packed passage-then-question sequences over the whole position range."""
    from .synth import pack_sequences, pretraining_texts

    units = [vocab.encode(t) for t in pretraining_texts(dataset)]
    units = [u for u in units if u]
    if not units:
        raise DataError("dataset has no relevant question-passage pairs to pretrain on")
    target = min(config["model"]["pretrain_pack_len"], config["model"]["max_seq_len"])
    return pack_sequences(units, target_len=target, seed=config["seed"],
                          n_sequences=max(400, len(units)))


def _out_path(config: dict, key: str, override: str | None) -> Path:
    if override:
        return Path(override)
    out_dir = Path(config["paths"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / config["paths"][key]


def _model_config(config: dict, vocab_size: int) -> ModelConfig:
    m = config["model"]
    return ModelConfig(vocab_size=vocab_size, dim=m["dim"], n_layers=m["n_layers"],
                       n_heads=m["n_heads"], max_seq_len=m["max_seq_len"],
                       ffn_mult=m["ffn_mult"])


def _theta_count(config: dict, vocab_size: int) -> int:
    a = config["adapter"]
    dim = config["model"]["dim"]
    return a["soft_prompt_len"] * dim + vocab_size * a["rank"] + a["rank"] * dim


def cmd_init_model(config: dict, args) -> int:
    dataset = _require_dataset(config, args)
    vocab = Vocabulary.from_texts(dataset.texts(), cap=config["model"]["vocab_cap"])
    model_config = _model_config(config, len(vocab))
    m = config["model"]
    if m["pretrain_steps"] > 0:
        corpus = _pretraining_corpus(dataset, vocab, config)
        model = pretrain_micro_lm(corpus, model_config, vocab, seed=config["seed"],
                                  steps=m["pretrain_steps"],
                                  batch_size=m["pretrain_batch_size"], lr=m["pretrain_lr"])
    else:
        model = MicroLM.init(model_config, vocab, seed=config["seed"])
    out = _out_path(config, "model_checkpoint", args.out)
    save_model(model, out, meta={"seed": config["seed"], "pretrain_steps": m["pretrain_steps"]})
    frozen = model.param_count()
    theta = _theta_count(config, len(vocab))
    print(f"frozen parameters: {frozen}")
    print(f"trainable parameters: {theta}")
    print(f"trainable fraction: {100.0 * theta / frozen:.6f}%")
    print(f"wrote model checkpoint to {out}")
    return EXIT_OK


def cmd_pretrain(config: dict, args) -> int:
    dataset = _require_dataset(config, args)
    model = load_model(args.checkpoint or _out_path(config, "model_checkpoint", None))
    corpus = _pretraining_corpus(dataset, model.vocab, config)
    steps = args.steps if args.steps is not None else config["model"]["pretrain_steps"]
    continue_pretraining(model, corpus, seed=config["seed"], steps=steps,
                         batch_size=config["model"]["pretrain_batch_size"],
                         lr=config["model"]["pretrain_lr"])
    out = _out_path(config, "model_checkpoint", args.out)
    save_model(model, out, meta={"seed": config["seed"], "continued_steps": steps})
    print(f"wrote model checkpoint to {out}")
    return EXIT_OK


def _train_config(config: dict) -> TrainConfig:
    t = config["train"]
    return TrainConfig(batch_size=t["batch_size"], in_batch_negatives=t["in_batch_negatives"],
                       epochs=t["epochs"], lr_soft_prompt=t["lr_soft_prompt"],
                       lr_adapter=t["lr_adapter"], early_stop_patience=t["early_stop_patience"],
                       seed=config["seed"], train_sample_size=t["train_sample_size"],
                       dev_fraction=t["dev_fraction"], grad_clip=t["grad_clip"],
                       point_weight=t["point_weight"], pair_weight=t["pair_weight"],
                       literal_concat=config["adapter"]["literal_concat"])


def cmd_train(config: dict, args) -> int:
    dataset = _require_dataset(config, args)
    model = load_model(_out_path(config, "model_checkpoint", args.checkpoint))
    a = config["adapter"]
    params = init_pspt_params(model, hard_prompt=a["hard_prompt"],
                              soft_prompt_len=a["soft_prompt_len"], rank=a["rank"],
                              alpha=a["alpha"], seed=config["seed"])
    train_config = _train_config(config)
    instances = build_instances(dataset, seed=config["seed"],
                                sample_size=train_config.train_sample_size, vocab=model.vocab)
    result = train(train_config, instances, model, params)
    out = _out_path(config, "params_checkpoint", args.out)
    save_params(result.params, out)
    log_path = _out_path(config, "train_log", args.log)
    write_train_log(result.log, log_path)
    dev = "n/a" if result.best_dev_loss is None else f"{result.best_dev_loss:.6f}"
    print(f"trained {result.steps} steps; best epoch {result.best_epoch} (dev loss {dev})")
    print(f"wrote adapter checkpoint to {out}")
    print(f"wrote training log to {log_path}")
    return EXIT_OK


def _build_scorer(config: dict, args, model):
    mode = config["scoring"]["score_mode"]
    if args.scorer == "pspt":
        params = load_params(_out_path(config, "params_checkpoint", args.params))
        return make_pspt_scorer(model, params, mode=mode,
                                literal_concat=config["adapter"]["literal_concat"])
    if args.scorer == "upr":
        return make_upr_scorer(model, prompt_text=config["scoring"]["upr_prompt"], mode=mode)
    ex_q = config["scoring"]["upr_example_question"]
    ex_d = config["scoring"]["upr_example_passage"]
    if not ex_q or not ex_d:
        raise ConfigError("scorer upr_inst needs scoring.upr_example_question "
                          "and scoring.upr_example_passage")
    return make_upr_scorer(model, prompt_text=config["scoring"]["upr_prompt"], mode=mode,
                           example_texts=(ex_q, ex_d))


def cmd_rerank(config: dict, args) -> int:
    dataset = _require_dataset(config, args)
    model = load_model(_out_path(config, "model_checkpoint", args.checkpoint))
    scorer = _build_scorer(config, args, model)
    run_in = read_run_file(args.run_in)
    workers = args.workers if args.workers is not None else config["workers"]
    queries: dict[str, list[RunEntry]] = {}
    for qid in sorted(run_in.queries):
        if qid not in dataset.by_id:
            raise InputError(f"run references unknown query id {qid!r}")
        question = dataset.by_id[qid]
        candidates = [
            Candidate(e.passage_id, dataset.passage_text(e.passage_id), e.rank, e.score)
            for e in run_in.queries[qid]
        ]
        ranked = rerank_with_scores(question.text, candidates, scorer, workers=workers)
        queries[qid] = [RunEntry(c.passage_id, i + 1, s) for i, (c, s) in enumerate(ranked)]
    out_run = RetrievalRun(args.scorer, queries)
    write_run_file(out_run, args.run_out)
    print(f"wrote reranked run ({args.scorer}) to {args.run_out}")
    return EXIT_OK


def cmd_eval(config: dict, args) -> int:
    dataset = _require_dataset(config, args)
    runs = [read_run_file(path) for path in args.runs]
    baseline = args.baseline_tag or config["eval"]["baseline_tag"]
    report = evaluate(runs, dataset, k_list=config["eval"]["k_list"],
                      baseline_tag=baseline, capped_recall=config["eval"]["capped_recall"])
    out_dir = Path(config["paths"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    text_path = out_dir / "report.txt"
    with open(json_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    table = report.format_table()
    with open(text_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(table + "\n")
    print(table)
    print(f"wrote {json_path} and {text_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pspt",
                                     description="Soft-prompt passage reranking workflows")
    parser.add_argument("--config", help="JSON config file (defaults apply if omitted)")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--workers", type=int, help="override config worker count")
    sub = parser.add_subparsers(dest="command", required=True)

    def subcommand(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--dataset", help="override paths.dataset for this command")
        return p

    p = subcommand("init-model", "build vocabulary, init/pretrain and save the model")
    p.add_argument("--out", help="model checkpoint path")

    p = subcommand("pretrain", "continue language-model pretraining")
    p.add_argument("--checkpoint", help="existing model checkpoint")
    p.add_argument("--steps", type=int, help="number of pretraining steps")
    p.add_argument("--out", help="output checkpoint path")

    p = subcommand("train", "train the soft prompt and adapter")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--out", help="adapter checkpoint path")
    p.add_argument("--log", help="training log path")

    p = subcommand("rerank", "rerank a retrieval run file")
    p.add_argument("--run-in", required=True)
    p.add_argument("--run-out", required=True)
    p.add_argument("--scorer", choices=["pspt", "upr", "upr_inst"], default="pspt")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--params", help="adapter checkpoint path")

    p = subcommand("eval", "score runs against the dataset judgments")
    p.add_argument("--run", dest="runs", action="append", required=True,
                   help="run file (repeatable)")
    p.add_argument("--baseline-tag", help="tag to test other runs against")
    return parser


COMMANDS = {
    "init-model": cmd_init_model,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    level = os.environ.get("PSPT_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config["seed"] = args.seed
        if args.workers is not None:
            config["workers"] = args.workers
        return COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, InputError, VocabularyError, CheckpointError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PsptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
