"""Command-line entry point ``sim``.

``sim run <config>``
    Run one experiment and write CSV or JSON.
``sim verify [<config>]``
    Run the oracle suite; exit status 3 if any oracle fails.
``sim print-defaults [--experiment NAME]``
    Print a complete config with every parameter at its default.

Exit status: 0 success, 2 configuration error, 3 numerical failure.
Worker processes for sweeps come from ``SIM_WORKERS``.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .config import EXPERIMENTS, default_config_text, dump_yaml, echo_config, load_config, parse_config
from .errors import ConfigError, JPMReadoutError
from .experiments import COLUMN_DOCS, run_experiment
from .verify import verify

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

HEADER_TAG = "jpmreadout"


def _fmt(x):
    return format(x, ".17g")


def format_csv(cfg, columns, rows):
    """CSV text: commented config echo, column header, rows at 17 digits."""
    echo = dump_yaml(echo_config(cfg)).rstrip("\n").split("\n")
    lines = [f"# {HEADER_TAG} {__version__} output of experiment {cfg.experiment}"]
    lines += [f"# {line}" for line in echo]
    lines.append("# # columns:")
    lines += [f"# #   {c}: {COLUMN_DOCS.get(c, 'sweep axis (internal units)')}" for c in columns]
    lines.append(",".join(columns))
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def format_json(cfg, columns, rows):
    doc = {
        "generator": f"{HEADER_TAG} {__version__}",
        "config": echo_config(cfg),
        "columns": list(columns),
        "column_docs": {c: COLUMN_DOCS.get(c, "sweep axis (internal units)") for c in columns},
        "rows": [list(r) for r in rows],
    }
    return json.dumps(doc, indent=1) + "\n"


def _write(text, path):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def cmd_run(args):
    cfg = load_config(args.config)
    if args.output is not None:
        cfg.output_path = args.output
    if args.format is not None:
        cfg.output_format = args.format
    columns, rows = run_experiment(cfg)
    fmt = format_csv if cfg.output_format == "csv" else format_json
    _write(fmt(cfg, columns, rows), cfg.output_path)
    return EXIT_OK


def cmd_verify(args):
    cfg = load_config(args.config) if args.config else parse_config({"experiment": "lifetimes"})
    results = verify(cfg)
    for r in results:
        print(r.line(), flush=True)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} oracles passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


def cmd_print_defaults(args):
    sys.stdout.write(default_config_text(args.experiment))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="sim", description="JPM qubit readout simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config", help="YAML config, or a previous output file to re-run")
    run.add_argument("-o", "--output", help="output path ('-' for stdout); overrides output.path")
    run.add_argument("--format", choices=("csv", "json"), help="overrides output.format")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run the oracle suite")
    ver.add_argument("config", nargs="?", help="config whose params and integrator settings are used")
    ver.set_defaults(func=cmd_verify)

    pd = sub.add_parser("print-defaults", help="print a config with all defaults")
    pd.add_argument("--experiment", choices=EXPERIMENTS, default="contrast_vs_time")
    pd.set_defaults(func=cmd_print_defaults)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (JPMReadoutError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
