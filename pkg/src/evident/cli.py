"""Command-line entry point: ``evident repair|batch|distill|recipe|inventory``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from evident.distill import LogDistiller, classify, load_keywords, signals_to_json
from evident.enums import Outcome
from evident.errors import BrokenInputError, ConfigError, EvidentError, RecipeStructureError
from evident.orchestrator import SessionConfig, load_manifest, run_batch, run_session
from evident.recipe import parse_recipe
from evident.workspace import PruneRules, inventory

EXIT_CODES = {Outcome.SUCCESS: 0, Outcome.FAILED: 1, Outcome.BROKEN_UNSOLVABLE: 2}
EXIT_CONFIG = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _emit(text: str, out: str | None) -> None:
    if out and out != "-":
        Path(out).write_text(text + "\n", "utf-8")
    else:
        print(text)


def _session_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--isa", default="riscv64", choices=["riscv64", "aarch64", "x86_64", "any"])
    p.add_argument("--budget", type=int, default=3, help="maximum repair iterations")
    p.add_argument("--window", type=float, default=600.0, help="build monitoring window in seconds")
    p.add_argument("--corpus", help="knowledge corpus (JSON Lines); defaults to the bundled one for --isa")
    p.add_argument("--keywords", help="keyword file for log distillation")
    p.add_argument("--prune-rules", help="inventory prune rules file")
    p.add_argument("--max-tool-calls", type=int, default=20)
    p.add_argument("--poll-interval", type=float)


def _config(args, **extra) -> SessionConfig:
    return SessionConfig(
        budget=args.budget,
        window=args.window,
        isa=args.isa,
        keyword_config=args.keywords,
        corpus_path=args.corpus,
        prune_rules=args.prune_rules,
        max_tool_calls=args.max_tool_calls,
        poll_interval=args.poll_interval,
        **extra,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evident", description="Evidence-preserving package build repair.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("repair", help="run one repair session")
    p.add_argument("--workspace", required=True)
    p.add_argument("--log", help="reproduced failure log")
    p.add_argument("--driver", required=True, help="scripted:<script.json> or remote")
    p.add_argument("--service", required=True, help="sim:<session.json> or real")
    p.add_argument("--package-id")
    p.add_argument("--report", help="write the report.v1 JSON here")
    _session_args(p)

    p = sub.add_parser("batch", help="run every package of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--summary", help="write the batch summary JSON here")
    p.add_argument("--reports-dir", help="write one report.v1 JSON per package here")
    _session_args(p)

    p = sub.add_parser("distill", help="distill a build log into failure signals")
    p.add_argument("--log", required=True)
    p.add_argument("--keywords")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--emit-signals", metavar="OUT", help="write signals.v1 JSON here (default stdout)")

    p = sub.add_parser("recipe", help="parse a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--emit-recipe", metavar="OUT", help="write recipe.v1 JSON here (default stdout)")

    p = sub.add_parser("inventory", help="list a workspace")
    p.add_argument("--workspace", required=True)
    p.add_argument("--prune-rules")
    p.add_argument("--emit-inventory", metavar="OUT", help="write inventory.v1 JSON here (default stdout)")
    return parser


def _cmd_repair(args) -> int:
    config = _config(args, driver=args.driver, service=args.service, package_id=args.package_id)
    report = run_session(config, args.workspace, args.log)
    if any(d.startswith("configuration:") for d in report.diagnostics):
        for d in report.diagnostics:
            print(d, file=sys.stderr)
        return EXIT_CONFIG
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", "utf-8")
    print(f"{report.package_id}: {report.outcome.value} after {report.iterations_used} iteration(s) "
          f"[verdicts: {', '.join(report.verdicts) or 'none'}]")
    for d in report.diagnostics:
        print(f"  {d}")
    return EXIT_CODES[report.outcome]


def _cmd_batch(args) -> int:
    items = load_manifest(args.manifest)
    summary = run_batch(_config(args), items, workers=args.workers)
    if args.reports_dir:
        out = Path(args.reports_dir)
        out.mkdir(parents=True, exist_ok=True)
        for n, r in enumerate(summary.reports):
            (out / f"{n:03d}-{r.package_id}.json").write_text(r.to_json() + "\n", "utf-8")
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary.to_dict(), indent=2) + "\n", "utf-8")
    print(summary.table())
    print("verdicts: " + ", ".join(f"{k}={v}" for k, v in summary.verdict_counts.items()))
    return 0


def _cmd_distill(args) -> int:
    keywords = load_keywords(args.keywords) if args.keywords else None
    raw = Path(args.log).read_bytes()
    signals = LogDistiller(keywords=keywords, window=args.window).fit().distill_one(raw)
    _emit(signals_to_json(signals), args.emit_signals)
    if args.emit_signals and args.emit_signals != "-":
        cat = classify(signals)
        print(f"{len(signals)} signal(s); category: {cat.category}"
              + (f" / {cat.subcategory}" if cat.subcategory else ""))
    return 0


def _cmd_recipe(args) -> int:
    try:
        rc = parse_recipe(Path(args.spec).read_text("utf-8", "replace"))
    except RecipeStructureError as exc:
        print(f"structural error: {exc}", file=sys.stderr)
        return 1
    _emit(rc.to_json(), args.emit_recipe)
    return 0


def _cmd_inventory(args) -> int:
    rules = PruneRules.from_file(args.prune_rules) if args.prune_rules else None
    _emit(inventory(args.workspace, rules).to_json(), args.emit_inventory)
    return 0


COMMANDS = {
    "repair": _cmd_repair,
    "batch": _cmd_batch,
    "distill": _cmd_distill,
    "recipe": _cmd_recipe,
    "inventory": _cmd_inventory,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except BrokenInputError as exc:
        print(f"broken input: {exc}", file=sys.stderr)
        return EXIT_CODES[Outcome.BROKEN_UNSOLVABLE]
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EvidentError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
