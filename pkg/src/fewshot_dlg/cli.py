"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/config error.  All randomness
flows from --seed or the config file's base_seed; with neither given, the
fixed default seed 1234 applies.  Errors are reported on stderr as
one-line diagnostics, never stack traces (run with --log-level debug for
the full trace).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .corpus import (
    Corpus,
    CorpusFormat,
    Speaker,
    TrainingInstance,
    Turn,
    exclude_overlap,
    load_corpus,
    sample_few_shot,
    save_corpus,
    tokenize,
    FewShotSpec,
)
from .errors import BadCheckpoint, FewshotDlgError
from .generator import generate_response
from .latent import LaedModel, LatentModel, LatentVariant, cluster_by_code
from .pipeline import (
    DEFAULT_SEED,
    Stage1Checkpoints,
    derive_seed,
    evaluate_model,
    load_config,
    load_generator_checkpoint,
    load_latent_checkpoint,
    run_experiment,
    train_stage1,
    train_stage2,
)

logger = logging.getLogger(__name__)

_LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fewshot-dlg", description=__doc__)
    parser.add_argument("--config", help="experiment config file (key=value lines)")
    parser.add_argument("--seed", type=int, help=f"base seed (default {DEFAULT_SEED})")
    parser.add_argument(
        "--log-level", choices=sorted(_LOG_LEVELS), default="info", help="logging verbosity"
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("prepare-data", help="normalize a corpus file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", required=True, choices=["smd", "metalwoz", "normalized"])
    p.add_argument("--output", required=True)

    p = sub.add_parser("train-stage1", help="train the latent representation models")
    p.add_argument("--output", required=True)

    p = sub.add_parser("train-stage2", help="train the response generator")
    p.add_argument("--stage1", help="stage-1 checkpoint root (as written by train-stage1)")
    p.add_argument("--output", required=True)
    p.add_argument("--ratio", type=float, help="few-shot ratio (default: first configured ratio)")
    p.add_argument("--run-seed", type=int, help="per-run seed (default: base seed)")

    p = sub.add_parser("evaluate", help="score a generator checkpoint on a corpus domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--format", default="normalized", choices=["smd", "metalwoz", "normalized"])

    p = sub.add_parser("run-experiment", help="run the full multi-seed experiment grid")
    p.add_argument("--output", required=True)

    p = sub.add_parser("inspect-codes", help="show utterance clusters per latent code")
    p.add_argument("--checkpoint", required=True, help="a stage-1 checkpoint directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", default="normalized", choices=["smd", "metalwoz", "normalized"])
    p.add_argument("--top", type=int, default=10, help="number of clusters to print")
    p.add_argument("--samples", type=int, default=5, help="utterances shown per cluster")

    p = sub.add_parser("chat", help="interactive REPL against a generator checkpoint")
    p.add_argument("--checkpoint", required=True)
    return parser


def _stage1_from_dir(root: str | None) -> Stage1Checkpoints | None:
    if root is None:
        return None
    root = Path(root)
    found = Stage1Checkpoints()
    any_found = False
    for name in ("divae", "laed", "vae"):
        cand = root / name
        if (cand / "manifest.txt").exists():
            setattr(found, name, cand)
            any_found = True
    if not any_found:
        raise BadCheckpoint(f"no stage-1 checkpoints under {root}")
    return found


def _require_config(args) -> "ExperimentConfig":
    if not args.config:
        raise _UsageError(f"{args.command} requires --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.base_seed = args.seed
    return cfg


def _cmd_prepare_data(args) -> int:
    corpus = load_corpus(args.input, CorpusFormat(args.format))
    save_corpus(corpus, args.output)
    print(f"wrote {len(corpus)} dialogues, {len(corpus.domains)} domains -> {args.output}")
    return 0


def _cmd_train_stage1(args) -> int:
    cfg = _require_config(args)
    transfer = load_corpus(cfg.transfer_corpus, cfg.transfer_format)
    if cfg.exclusions is not None:
        excluded = tuple(cfg.exclusions)
        kept = transfer.without_domains(excluded)
    else:
        kept = exclude_overlap(transfer, cfg.target_domain)
        excluded = tuple(sorted(d for d in transfer.domains if d not in kept.domains))
    paths = train_stage1(cfg, kept, args.output, excluded)
    for name in ("divae", "laed", "vae"):
        path = getattr(paths, name)
        if path is not None:
            print(f"{name}: {path}")
    return 0


def _cmd_train_stage2(args) -> int:
    cfg = _require_config(args)
    main_corpus = load_corpus(cfg.main_corpus, cfg.main_format)
    source = main_corpus.without_domains({cfg.target_domain})
    ratio = args.ratio if args.ratio is not None else cfg.ratios[0]
    run_seed = args.run_seed if args.run_seed is not None else cfg.base_seed
    spec = FewShotSpec(cfg.target_domain, ratio, derive_seed(run_seed, "sampling"))
    seed_corpus = sample_few_shot(main_corpus, spec)
    stage1 = _stage1_from_dir(args.stage1)
    path = train_stage2(cfg, source, seed_corpus, stage1, args.output, run_seed)
    print(f"generator: {path}")
    return 0


def _cmd_evaluate(args) -> int:
    model = load_generator_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus, CorpusFormat(args.format))
    scores = evaluate_model(model, corpus, args.domain)
    print(f"domain: {args.domain}  pairs: {scores['n_pairs']}")
    print(f"BLEU, %      {scores['bleu']:.1f}")
    print(f"Entity P, %  {scores['entity_p']:.1f}")
    print(f"Entity R, %  {scores['entity_r']:.1f}")
    print(f"Entity F1, % {scores['entity_f1']:.1f}")
    print(json.dumps(scores, sort_keys=True))
    return 0


def _cmd_run_experiment(args) -> int:
    cfg = _require_config(args)
    report = run_experiment(cfg, args.output)
    print(report.format_table(), end="")
    print(f"report: {Path(args.output) / 'report.txt'}")
    return 0


def _cmd_inspect_codes(args) -> int:
    model = load_latent_checkpoint(args.checkpoint)
    if isinstance(model, LaedModel):
        model = model.vst
    if not isinstance(model, LatentModel) or model.variant is LatentVariant.VAE:
        raise BadCheckpoint("inspect-codes needs a discrete latent checkpoint")
    corpus = load_corpus(args.corpus, CorpusFormat(args.format))
    buckets = cluster_by_code(corpus, model)
    for i, (code, utterances) in enumerate(buckets.items()):
        if i >= args.top:
            break
        print(f"code {code}  ({len(utterances)} utterances)")
        for text in utterances[: args.samples]:
            print(f"  {text}")
    return 0


def _cmd_chat(args) -> int:
    model = load_generator_checkpoint(args.checkpoint)
    turns: list[Turn] = []
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            return 0
        if line == ":reset":
            turns.clear()
            continue
        context = tuple((t.speaker, t.tokens) for t in turns)
        instance = TrainingInstance(
            context=context,
            x_usr=tuple(tokenize(line)),
            x_sys=(),
            kb=(),
            domain="chat",
        )
        reply_tokens = generate_response(instance, model)
        reply = " ".join(reply_tokens)
        print(reply, flush=True)
        turns.append(Turn(Speaker.USER, line))
        turns.append(Turn(Speaker.SYSTEM, reply))
    return 0


_COMMANDS = {
    "prepare-data": _cmd_prepare_data,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "evaluate": _cmd_evaluate,
    "run-experiment": _cmd_run_experiment,
    "inspect-codes": _cmd_inspect_codes,
    "chat": _cmd_chat,
}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=_LOG_LEVELS[args.log_level], format="%(levelname)s %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FewshotDlgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.log_level == "debug":
            traceback.print_exc()
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
