"""Command line entry points for the experiment pipeline.

Every stage is invocable on its own; artifacts land in the --out
directory and later commands reuse whatever already exists there.
A JSON config file deep-merges over the built-in defaults, and
--seed overrides the plan seed after the merge.
"""

from __future__ import annotations

import argparse
import json
import sys

from .data import DataError
from .decoding import DecodeError
from .metrics import MetricError, evaluate
from .model import ConfigError, VocabError
from .pipeline import SYSTEMS, PipelineError, Workspace, format_table_text
from .training import SchedulerError, TrainingError
from .transfer import CheckpointError, TransferError

_FAILURES = (
    PipelineError, DataError, TrainingError, SchedulerError, TransferError,
    CheckpointError, DecodeError, MetricError, ConfigError, VocabError,
    OSError, json.JSONDecodeError,
)


def _add_common(parser: argparse.ArgumentParser, with_fraction: bool = False) -> None:
    parser.add_argument("--out", required=True, help="workspace directory")
    parser.add_argument("--config", help="JSON config merged over the defaults")
    parser.add_argument("--seed", type=int, help="override the plan seed")
    if with_fraction:
        parser.add_argument("--fraction", type=float, default=1.0,
                            help="training-data fraction for fine-tuning stages")


def _workspace(args) -> Workspace:
    override: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            override = json.load(fh)
    if args.seed is not None:
        override = dict(override)
        override["seed"] = args.seed
    return Workspace(args.out, override)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechsum",
        description="speech summarization experiments on a synthetic corpus",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and persist the corpus")
    _add_common(p)

    p = sub.add_parser("pretrain-asr", help="train the recognizer")
    _add_common(p)

    p = sub.add_parser("pretrain-lm", help="train the denoising language model")
    _add_common(p)

    p = sub.add_parser("finetune", help="train one system end to end")
    _add_common(p, with_fraction=True)
    p.add_argument("--system", required=True,
                   choices=["tsum", "B-1", "B-2", "P-1", "P-2", "P-3"])

    p = sub.add_parser("transplant",
                       help="assemble a transplanted model without fine-tuning")
    _add_common(p, with_fraction=True)
    p.add_argument("--system", required=True, choices=["P-1", "P-2", "P-3"])

    p = sub.add_parser("decode", help="decode the evaluation split for one system")
    _add_common(p, with_fraction=True)
    p.add_argument("--system", required=True, choices=list(SYSTEMS))

    p = sub.add_parser("evaluate", help="score a decode file against references")
    p.add_argument("--hyp", required=True, help="uid<TAB>text hypothesis file")
    p.add_argument("--ref", required=True, help="uid<TAB>text reference file")
    p.add_argument("--wer", action="store_true", help="also report word error rate")

    p = sub.add_parser("run-table", help="build, decode and score all systems")
    _add_common(p)
    p.add_argument("--fraction", type=float, action="append",
                   help="training-data fraction; repeat for a sweep (default 1.0)")
    p.add_argument("--system", action="append", choices=list(SYSTEMS),
                   help="restrict to these systems; repeat (default: all)")
    return parser


def _cmd_finetune(ws: Workspace, args) -> int:
    builders = {
        "tsum": ws.ensure_tsum,
        "B-1": ws.ensure_b1,
        "B-2": ws.ensure_b2,
        "P-1": lambda f: ws.ensure_variant("P-1", f),
        "P-2": lambda f: ws.ensure_variant("P-2", f),
        "P-3": lambda f: ws.ensure_variant("P-3", f),
    }
    path = builders[args.system](args.fraction)
    print(path)
    return 0


def _cmd_run_table(ws: Workspace, args) -> int:
    fractions = args.fraction or [1.0]
    systems = tuple(args.system) if args.system else SYSTEMS
    if len(fractions) == 1:
        tables = [ws.run_table(fractions[0], systems=systems)]
    else:
        tables = ws.run_sweep(tuple(fractions), systems=systems)
    failed = False
    for table in tables:
        print(format_table_text(table, ws), end="")
        print(f"written: {table.text_path}")
        print(f"written: {table.machine_path}")
        failed = failed or any(r.error is not None for r in table.results)
    return 1 if failed else 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "evaluate":
            report = evaluate(args.hyp, args.ref, include_wer=args.wer)
            print(report.as_text())
            for line in report.machine_lines():
                print(line)
            return 0
        ws = _workspace(args)
        if args.command == "gen-data":
            corpus = ws.corpus()
            sizes = {name: len(corpus.splits[name]) for name in corpus.splits}
            print(f"corpus ready at {ws.root}/corpus: " +
                  " ".join(f"{k}={v}" for k, v in sizes.items()))
            return 0
        if args.command == "pretrain-asr":
            print(ws.ensure_asr())
            return 0
        if args.command == "pretrain-lm":
            print(ws.ensure_lm())
            return 0
        if args.command == "finetune":
            return _cmd_finetune(ws, args)
        if args.command == "transplant":
            print(ws.ensure_raw_variant(args.system, args.fraction))
            return 0
        if args.command == "decode":
            print(ws.decode_system(args.system, args.fraction))
            return 0
        if args.command == "run-table":
            return _cmd_run_table(ws, args)
        raise PipelineError(f"unhandled command {args.command!r}")
    except _FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
