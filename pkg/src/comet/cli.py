"""
Command-line entry point.

    comet synthesize --seed 7 --n 50 --rows 4 --cols 5 --out corpus.json
    comet train --corpus corpus.json --config desk.json --out-dir run/
    comet evaluate --corpus corpus.json --checkpoint run/best.json --split test
    comet generate --checkpoint run/best.json --input query.json
    comet inspect-mask --corpus corpus.json --dialogue-id navigate-00000

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .corpus import (
    Turn, build_vocab, dialogue_from_dict, generate_synthetic, load_corpus, save_corpus, split, turn_from_dict,
)
from .errors import CheckpointError, CometError, ConfigError, TrainingDiverged, ValidationError
from .kb import KnowledgeBase, build_memory_mask, flatten_kb
from .model import greedy_generate
from .training import evaluate, make_examples, train

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(CometError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def cmd_synthesize(args) -> dict:
    corpus = generate_synthetic(args.seed, args.n, args.rows, args.cols, args.domains)
    try:
        save_corpus(corpus, args.out)
    except OSError as exc:
        raise RuntimeError(f"cannot write {args.out}: {exc}") from None
    return {"out": str(args.out), "n_dialogues": len(corpus), "n_examples": corpus.n_examples()}


def _splits(corpus, config):
    return dict(zip(("train", "dev", "test"), split(corpus, config.split, config.seed)))


def cmd_train(args) -> dict:
    config = ModelConfig.load(args.config) if args.config else ModelConfig.desk()
    corpus = load_corpus(args.corpus)
    out = Path(args.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    parts = _splits(corpus, config)
    vocab = build_vocab(parts["train"], config.min_count)
    result = train(parts["train"], config, parts["dev"], vocab=vocab, log_path=out / "metrics.jsonl")
    save_checkpoint(result.model, out / "best.json",
                    extra={"best_step": result.best_step, "best_dev_f1": result.best_dev_f1})
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    return {"checkpoint": str(out / "best.json"), "best_step": result.best_step,
            "best_dev_f1": result.best_dev_f1, "final_loss": result.final_loss}


def cmd_evaluate(args) -> dict:
    model = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    subset = corpus if args.split == "all" else _splits(corpus, model.config)[args.split]
    examples = make_examples(subset, model.vocab, model.config)
    res = evaluate(model, examples)
    report = {k: res[k] for k in ("bleu", "f1", "per_domain", "n_examples")}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    return report


def _read_query(path):
    """History and KB from a query file.

    Either ``{"dialogue": <corpus dialogue>}`` (all turns are used as
    history) or ``{"history": [...], "kb": {"columns": [...], "rows": [...]}}``
    where history items are plain strings (alternating user/system) or turn
    objects with entity spans.
    """
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc})") from None
    except FileNotFoundError:
        raise ValidationError(f"{path}: no such query file") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: top level must be an object")
    if "dialogue" in obj:
        d = dialogue_from_dict(obj["dialogue"])
        return list(d.turns), d.kb
    kbobj = obj.get("kb") or {}
    kb = KnowledgeBase(tuple(kbobj.get("columns", ())), tuple(tuple(r) for r in kbobj.get("rows", ())))
    history = []
    for i, t in enumerate(obj.get("history", [])):
        if isinstance(t, str):
            history.append(Turn(("user", "system")[i % 2], t))
        else:
            history.append(turn_from_dict(t, f"history[{i}]"))
    return history, kb


def cmd_generate(args) -> dict:
    model = load_checkpoint(args.checkpoint)
    history, kb = _read_query(args.input)
    return greedy_generate(model, history, kb, args.max_len).to_dict()


def cmd_inspect_mask(args) -> dict:
    corpus = load_corpus(args.corpus)
    try:
        dialogue = corpus.by_id(args.dialogue_id)
    except KeyError as exc:
        raise ValidationError(str(exc.args[0])) from None
    mask = build_memory_mask(flatten_kb(dialogue.kb))
    print(mask.render())
    return {"size": mask.size, "allowed": mask.n_allowed()}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="comet", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synthesize", help="write a synthetic corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=_positive, required=True)
    s.add_argument("--rows", type=_positive, default=4)
    s.add_argument("--cols", type=_positive, default=5)
    s.add_argument("--domains", type=_positive, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("train", help="train and keep the best dev checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="BLEU and Entity F1 report")
    s.add_argument("--corpus", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "dev", "test", "all"), default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("generate", help="greedy sketch, response and links for one query")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--max-len", type=_positive)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("inspect-mask", help="render the memory mask of a dialogue")
    s.add_argument("--corpus", required=True)
    s.add_argument("--dialogue-id", required=True)
    s.set_defaults(func=cmd_inspect_mask)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if result is not None:
        print(json.dumps(result, indent=1))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
