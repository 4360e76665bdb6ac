"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, DataError, dump_config, load_config
from .numerics import CheckpointError
from .supervision import NonFiniteLoss
from .synthcorpus import CorpusFormatError, generate, read_gaze_sessions, write_corpus

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazevlp")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train and write checkpoints + JSONL log")
    _common(p)
    p.add_argument("--resume", help="state.json of an earlier run")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--temperature-literal", action="store_true",
                   help="divide similarities by the stored temperature instead of exp-scaling")

    p = sub.add_parser("eval-retrieval", help="P@K / R@K on a balanced split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--recall", choices=("hit", "fraction"), default="hit")
    p.add_argument("--clamp-k", action="store_true", help="clamp K to the index size")
    p.add_argument("--emit-plots", metavar="SVG")
    p.add_argument("--out", help="write the metric report JSON here")

    p = sub.add_parser("eval-zeroshot", help="prompt-prototype classification")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompts", help="YAML mapping class name -> list of token lists")
    p.add_argument("--out")

    p = sub.add_parser("gaze-export", help="write gaze priors and heatmaps")
    _common(p)
    p.add_argument("--input", help="gaze-session JSONL (default: sessions of the configured corpus)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic JSONL corpus")
    _common(p)
    p.add_argument("--output", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--coords", type=int, default=2)
    return parser


def _emit(report, out):
    text = report.to_json()
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def run(args) -> int:
    from . import training

    if args.command == "gradcheck":
        from .gradcheck import run_gradient_suite
        rep = run_gradient_suite(args.seeds, args.coords)
        for name, err in sorted(rep.worst.items()):
            print(f"{name:22s} {err:.3e}")
        print(f"max {rep.max_error:.3e} over {rep.seeds} seeds in {rep.seconds:.1f}s")
        return EXIT_OK if rep.passed() else EXIT_NUMERIC

    overrides = list(args.overrides)
    if getattr(args, "temperature_literal", False):
        overrides.append("supervision.temperature_literal=true")
    cfg = load_config(args.config, overrides)

    if args.command == "pretrain":
        result = training.pretrain(cfg, resume=args.resume, max_steps=args.max_steps)
        dump_config(cfg, result.output_dir / "config.yaml")
        print(json.dumps({"best": str(result.best_checkpoint), "last": str(result.last_checkpoint),
                          "config_hash": cfg.config_hash(), "seed": cfg.seed}))
    elif args.command == "eval-retrieval":
        report = training.eval_retrieval(cfg, args.checkpoint, recall=args.recall,
                                         clamp=args.clamp_k, emit_plots=args.emit_plots)
        _emit(report, args.out)
    elif args.command == "eval-zeroshot":
        report = training.eval_zeroshot(cfg, args.checkpoint, args.prompts)
        _emit(report, args.out)
    elif args.command == "gaze-export":
        sessions = None
        if args.input:
            try:
                sessions = read_gaze_sessions(args.input)
            except OSError as exc:
                raise DataError(f"cannot read {args.input}: {exc}") from exc
        for path in training.gaze_export(cfg, args.out, sessions):
            print(path)
    elif args.command == "gen-corpus":
        studies = generate(cfg.data.synthetic)
        write_corpus(studies, args.output)
        print(f"wrote {len(studies)} studies to {args.output}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorpusFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
