"""``twin`` command line: run experiments, validate configs, summarize reports."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import COMMANDS, ConfigError, load_config, validate_config
from .experiments import SummaryError, format_summary, run, summarize, workers_from_env
from .training import TrainingDiverged

OK, VALIDATION_FAILED, RUNTIME_FAILED = 0, 1, 2

log = logging.getLogger("twin")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"`` or ``"0-4"`` or a mix such as ``"0-2,7"``."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ValueError
                seeds.extend(range(a, b + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twin", description="Two-stage lifelong-behavior attention experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        c = sub.add_parser(name, help=f"run the {name} experiment")
        c.add_argument("--config", required=True, type=Path)
        c.add_argument("--seeds", type=parse_seeds, default=None, help="overrides the config's seeds")
        c.add_argument("--out", required=True, type=Path)
    v = sub.add_parser("validate", help="schema-check a config file")
    v.add_argument("config", type=Path)
    s = sub.add_parser("summarize", help="mean and std over seeds of report files")
    s.add_argument("reports", nargs="+", type=Path)
    s.add_argument("--out", type=Path, default=None)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return VALIDATION_FAILED
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "validate":
        errors = validate_config(args.config)
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        if errors:
            return VALIDATION_FAILED
        print(f"{args.config}: ok")
        return OK

    if args.command == "summarize":
        try:
            rows = summarize(args.reports, args.out)
        except SummaryError as e:
            print(f"error: {e}", file=sys.stderr)
            return VALIDATION_FAILED
        sys.stdout.write(format_summary(rows))
        return OK

    try:
        cfg = load_config(args.config, seeds=args.seeds, command=args.command)
        workers = workers_from_env()
    except (ConfigError, ValueError) as e:
        for msg in getattr(e, "errors", [str(e)]):
            print(f"error: {msg}", file=sys.stderr)
        return VALIDATION_FAILED
    try:
        report = run(cfg, args.out, workers=workers)
    except TrainingDiverged as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return RUNTIME_FAILED
    except Exception as e:  # any other failure is a runtime failure, with diagnostic
        log.debug("run failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return RUNTIME_FAILED
    print(f"{cfg.command}: {len(cfg.seeds)} seed(s), config {report['config_hash']}, "
          f"{report['wall_clock']:.1f}s -> {args.out}")
    for key, agg in report["aggregate"].items():
        print(f"  {key:<28} {agg['mean']:.6g} +- {agg['stderr']:.2g}")
    return OK


if __name__ == "__main__":
    sys.exit(main())
