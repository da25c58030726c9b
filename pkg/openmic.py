#!/usr/bin/env python3
"""
OpenMic Command Line
====================
Single entry point for corpus tooling, indexing, generation runs, judging,
markup compilation and run inspection.

Usage:
    python openmic.py index    --corpus jokes.jsonl [--out index/x.idx.json]
    python openmic.py generate "减肥" --corpus jokes.jsonl [--judge] [--out runs]
    python openmic.py judge    script.md [--out judge_report.json]
    python openmic.py markup   {check,strip,timeline} script.txt [--out timeline.json]
    python openmic.py convert  crosstalk.jsonl roster.txt --out converted.jsonl
    python openmic.py inspect  runs/<run-id>
    python openmic.py sweep    "减肥" --corpus jokes.jsonl --temperatures 0.1,0.3,0.5

Common flags: --config openmic.json, --set key=value (repeatable),
--mock-backend transcript.json, --seed N, --fixed-clock 2025-01-01T00:00:00

Exit codes:
    0   success
    1   configuration error
    2   corpus or markup error
    3   gateway error
    4   schema violation
    5   anonymization failure
    10  best-effort run (r_max exhausted without PASS)
"""

import argparse
import json
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Callable, Optional, Sequence

import structlog
from dotenv import load_dotenv

from agents import AgentCrew
from config import RunConfig, configure_logging, load_config
from errors import ConfigError, MarkupError, OpenMicError
from judge import evaluate, write_report
from llm_gateway import Gateway, open_gateway
from markup import compile_timeline, export_timeline, parse_markup, strip_plain
from orchestrator import inspect_run, run_pipeline, run_temperature_sweep
from rag import (
    EmbeddingIndex,
    build_index,
    convert_all,
    index_path,
    ingest_corpus,
    load_crosstalk,
    load_or_build_index,
    load_roster,
    write_corpus,
)


logger = structlog.get_logger(__name__)

BEST_EFFORT_EXIT = 10


def print_header(text: str, width: int = 70) -> None:
    """Section banner for multi-line command output."""
    rule = "=" * width
    print(f"\n{rule}\n  {text}\n{rule}")


def _status(tag: str, text: str) -> None:
    print(f"[{tag}] {text}")


def print_ok(text: str) -> None:
    """Success line."""
    _status("OK", text)


def print_error(text: str) -> None:
    """Failure line; the command still returns its exit code."""
    _status("ERROR", text)


def print_warning(text: str) -> None:
    """Degraded outcome, e.g. a best-effort run or skipped records."""
    _status("WARNING", text)


def print_info(text: str) -> None:
    _status("INFO", text)


# ============================================================================
# SHARED SETUP
# ============================================================================

def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _no_sleep(_seconds: float) -> None:
    pass


def _gateway(args, config: RunConfig) -> Gateway:
    sleep = _no_sleep if args.mock_backend else time.sleep
    return open_gateway(config, args.mock_backend, sleep=sleep)


def _clock(args) -> Callable[[], datetime]:
    if not args.fixed_clock:
        return datetime.now
    try:
        fixed = datetime.fromisoformat(args.fixed_clock)
    except ValueError:
        raise ConfigError(f"--fixed-clock must be an ISO timestamp, got {args.fixed_clock!r}")
    return lambda: fixed


def _run_seed(args, config: RunConfig) -> Optional[int]:
    """Run ids are reproducible only under a fixed clock."""
    return config.seed if args.fixed_clock else None


def _index(args, config: RunConfig, gateway: Gateway):
    corpus = ingest_corpus(args.corpus, strict=True)
    if getattr(args, "index", None):
        return corpus, EmbeddingIndex.load(args.index)
    return corpus, load_or_build_index(corpus, gateway, config)


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_index(args) -> int:
    config = _config(args)
    corpus = ingest_corpus(args.corpus, strict=not args.lenient)
    if corpus.skipped:
        print_warning(f"skipped {corpus.skipped} malformed lines")
    gateway = _gateway(args, config)
    with gateway.backend:
        index = build_index(corpus, gateway, config)
    out = index.save(args.out or index_path(config.index_dir, corpus))
    print_ok(f"indexed {len(index)} records, dimension {index.dimension} -> {out}")
    return 0


def cmd_generate(args) -> int:
    config = _config(args)
    gateway = _gateway(args, config)
    with gateway.backend:
        corpus, index = _index(args, config, gateway)
        result = run_pipeline(args.topic, config, gateway, index, corpus=corpus,
                              run_root=args.out or config.run_root, clock=_clock(args),
                              seed=_run_seed(args, config), judge=args.judge or config.judge)
    print_info(f"run id: {result.run_id}")
    print_info(f"rounds used: {result.rounds_used}/{config.r_max}")
    if result.judge_report is not None:
        print_info(f"S_total: {result.judge_report.total:.2f}")
    if result.passed:
        print_ok(f"PASS -> {result.run_dir / 'final' / 'script.md'}")
        return 0
    print_warning(f"best-effort output (no PASS within r_max) -> {result.run_dir / 'final' / 'script.md'}")
    return BEST_EFFORT_EXIT


def cmd_judge(args) -> int:
    config = _config(args)
    script = Path(args.script).read_text(encoding="utf-8")
    gateway = _gateway(args, config)
    with gateway.backend:
        report = evaluate(script, AgentCrew.from_config(config, gateway))
    out = write_report(report, args.out or Path(args.script).with_name("judge_report.json"))
    for name, value in report.scores.model_dump(exclude={"rationale"}).items():
        print(f"  {name:<11} {value:6.1f}")
    print_ok(f"S_total {report.total:.2f} -> {out}")
    return 0


def cmd_markup(args) -> int:
    config = _config(args)
    text = Path(args.input).read_text(encoding="utf-8")
    ast = parse_markup(text, strict=True, default_pause_ms=config.markup.default_pause_ms)
    if args.action == "check":
        print_ok(f"{args.input}: markup is well-formed")
    elif args.action == "strip":
        sys.stdout.write(strip_plain(ast))
    else:
        timeline = compile_timeline(ast, config.chars_per_minute, applause_ms=config.markup.applause_ms,
                                    laughter_ms=config.markup.laughter_ms)
        out = export_timeline(timeline, args.out or Path(args.input).with_name("timeline.json"))
        print_ok(f"{len(timeline.segments)} segments, total {timeline.total_ms} ms -> {out}")
    return 0


def cmd_convert(args) -> int:
    config = _config(args)
    scripts, skipped = load_crosstalk(args.crosstalk)
    roster = load_roster(args.roster)
    gateway = _gateway(args, config)
    with gateway.backend:
        converted, failures = convert_all(scripts, AgentCrew.from_config(config, gateway), roster)
    out = write_corpus(converted, args.out)
    print_info(f"anonymization scan: {len(converted)} clean, {len(failures)} failed, {skipped} skipped")
    print_ok(f"wrote {len(converted)} records -> {out}")
    if failures:
        for failure in failures:
            print_error(str(failure))
        return failures[0].exit_code
    return 0


def cmd_inspect(args) -> int:
    summary = inspect_run(args.run_dir)
    print_header(f"Run {summary['run_id']}")
    for r in summary["rounds"]:
        retrieval = " +rag" if r["retrieval"] else ""
        print(f"  round {r['round']}: Q^R={int(r['q_rag'])} Q^W={int(r['q_writer'])} -> {r['action']:<10} "
              f"{r['speakable_chars']} chars{retrieval}")
    result = summary["result"]
    if result is None:
        print_warning("no final/result.json (run aborted)")
        return 0
    line = f"{result['status']} after {result['rounds_used']} rounds"
    if "total" in result:
        line += f", S_total {result['total']:.2f}"
    print_ok(line)
    return 0


def cmd_sweep(args) -> int:
    config = _config(args)
    try:
        temperatures = [float(t) for t in args.temperatures.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--temperatures must be comma-separated numbers, got {args.temperatures!r}")
    out_dir = Path(args.out or config.run_root)
    gateway = _gateway(args, config)
    with gateway.backend:
        corpus, index = _index(args, config, gateway)
    rows = run_temperature_sweep(args.topic, temperatures, config, lambda cfg: _gateway(args, cfg), index,
                                 corpus=corpus, run_root=out_dir, clock=_clock(args),
                                 seed=_run_seed(args, config))
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_path = out_dir / "sweep.json"
    sweep_path.write_text(json.dumps([r.to_dict() for r in rows], ensure_ascii=False, indent=2) + "\n",
                          encoding="utf-8")
    for row in rows:
        print(f"  T={row.temperature:<4g} S_total={row.total:6.2f} {'PASS' if row.passed else 'best-effort'}")
    print_ok(f"sweep of {len(rows)} temperatures -> {sweep_path}")
    return 0


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (default: openmic.json if present)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    common.add_argument("--mock-backend", metavar="TRANSCRIPT", help="answer from a scripted transcript")
    common.add_argument("--seed", type=int, help="seed for mock embeddings and run ids")
    common.add_argument("--fixed-clock", metavar="ISO", help="fixed timestamp for reproducible run ids")
    common.add_argument("--log-level", default="WARNING")
    common.add_argument("--json-logs", action="store_true")

    parser = argparse.ArgumentParser(prog="openmic", description="Chinese stand-up generation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", parents=[common], help="embed a corpus into an index file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.add_argument("--lenient", action="store_true", help="skip malformed lines instead of failing")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("generate", parents=[common], help="run the pipeline for a topic")
    p.add_argument("topic")
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", help="prebuilt index file")
    p.add_argument("--judge", action="store_true")
    p.add_argument("--out", help="run root directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("judge", parents=[common], help="score a script")
    p.add_argument("script")
    p.add_argument("--out")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("markup", parents=[common], help="check, strip or compile performance markup")
    p.add_argument("action", choices=["check", "strip", "timeline"])
    p.add_argument("input")
    p.add_argument("--out")
    p.set_defaults(func=cmd_markup)

    p = sub.add_parser("convert", parents=[common], help="crosstalk to talk-show corpus conversion")
    p.add_argument("crosstalk")
    p.add_argument("roster")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("inspect", parents=[common], help="summarize a run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("sweep", parents=[common], help="judged runs across JokeWriter temperatures")
    p.add_argument("topic")
    p.add_argument("--corpus", required=True)
    p.add_argument("--index")
    p.add_argument("--temperatures", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.json_logs)
    try:
        return args.func(args)
    except MarkupError as e:
        print_error(str(e))
        return e.exit_code
    except OpenMicError as e:
        print_error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        print_error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
