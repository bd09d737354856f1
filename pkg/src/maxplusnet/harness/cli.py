"""``maxplusnet`` command line: run experiments, verify the build, inspect saved models.

Exit codes: 0 success, 1 usage or configuration error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from ..chain import LayerStack
from .config import OUT_DIR_ENV, ConfigError, load_config
from .experiments import run_experiment
from .metrics import fmt, summary_json, write_text

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", help=f"output directory (default: config value, ${OUT_DIR_ENV}, or ./out)")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")

    parser = _Parser(prog="maxplusnet", description="Morphological layers trained with B-derivatives.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    run = sub.add_parser("run", parents=[common], help="run the experiment described by a YAML config")
    run.add_argument("config_file", nargs="?", help="config file (same as --config)")
    run.add_argument("--config", help="config file")
    run.add_argument("--seed", type=int, help="override the config seed")
    ver = sub.add_parser("verify", parents=[common], help="run the oracle and property suite")
    ver.add_argument("--only", help="comma-separated criterion numbers, e.g. 1,2,7")
    ins = sub.add_parser("inspect", parents=[common], help="print the layers and weights of a saved model")
    ins.add_argument("model_file")
    return parser


def _out(args) -> str | None:
    return args.out_dir or None


def cmd_run(args) -> int:
    path = args.config or args.config_file
    if not path:
        raise UsageError("run: a config file is required (positional or --config)")
    cfg = load_config(path)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("must be >= 0", field="--seed")
        cfg = cfg.replace(seed=args.seed)
    out_dir = _out(args) or cfg.out_dir()
    result, paths = run_experiment(cfg, out_dir)
    if not args.quiet:
        print(f"task {cfg.task} seed {cfg.seed}")
        for key in ("initial_loss", "final_loss", "loss_ratio", "dead_weights", "strictly_more_dead_fraction",
                    "median_final_loss"):
            if key in result.summary:
                val = result.summary[key]
                print(f"  {key}: {val if isinstance(val, dict) else fmt(val)}")
        for p in paths:
            print(f"wrote {p}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    only = None
    if args.only:
        try:
            only = {int(s) for s in args.only.split(",") if s.strip()}
        except ValueError:
            raise UsageError(f"verify: --only expects comma-separated integers, got {args.only!r}") from None
        unknown = only - set(verify.CRITERIA)
        if unknown:
            raise UsageError(f"verify: unknown criteria {sorted(unknown)}")
    progress = None if args.quiet else (lambda r: print(r.line(), flush=True))
    results = verify.run_all(only, progress)
    rep = verify.report(results)
    out_dir = _out(args) or os.environ.get(OUT_DIR_ENV) or "out"
    path = os.path.join(out_dir, "verify.json")
    write_text(path, summary_json(rep))
    if not args.quiet:
        print(f"{sum(r.passed for r in results)}/{len(results)} criteria passed; report in {path}")
    return EXIT_OK if rep["passed"] else EXIT_VERIFY


def cmd_inspect(args) -> int:
    try:
        with open(args.model_file, encoding="utf-8") as fh:
            stack = LayerStack.from_json(fh.read())
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load model: {exc}", field=args.model_file) from None
    if args.quiet:
        return EXIT_OK
    for k, layer in enumerate(stack.layers):
        d = layer.to_dict()
        print(f"layer {k}: {d['kind']} shape={'x'.join(str(s) for s in d['shape'])}")
        for key in ("weights", "bias", "target"):
            if key in d:
                print(f"  {key}: {' '.join(fmt(float(v)) for v in d[key])}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
