"""Command-line entry point.

::

    popdyn run    <config.toml> [--out DIR] [--jobs K] [--seed-override S]
    popdyn sweep  <config.toml> [--out DIR] [--jobs K] [--seed-override S]
    popdyn verify <config.toml> [--out DIR] [--jobs K] [--seed-override S]

Exit status is 0 on success, 2 for configuration errors (nothing is
written) and 3 for numerical failures, including partially failed sweeps.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

from ..exceptions import ConfigError, NumericalError
from .config import load_config
from .experiments import SCHEMA_VERSION, run_mode

__all__ = ["main", "write_artifacts", "build_manifest"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_COMMAND_MODES = {
    "run": {"finite", "meanfield", "stationary", "verify-bound", "equilibrium", "sweep"},
    "sweep": {"sweep"},
    "verify": {"verify-bound", "stationary"},
}

log = logging.getLogger("popdyn")


def _kind(name):
    if name.endswith(".jsonl"):
        return "jsonl"
    return name.rsplit(".", 1)[-1]


def build_manifest(artifacts, config):
    """Manifest listing every artifact with its schema version and SHA-256."""
    entries = [
        {
            "name": name,
            "kind": _kind(name),
            "schema_version": SCHEMA_VERSION,
            "sha256": hashlib.sha256(text.encode()).hexdigest(),
        }
        for name, text in sorted(artifacts.items())
    ]
    effective = {k: v for k, v in config.items() if k != "output_dir"}
    return json.dumps(
        {"schema_version": SCHEMA_VERSION, "config": effective, "artifacts": entries},
        sort_keys=True,
        indent=2,
    ) + "\n"


def write_artifacts(out_dir, artifacts, config):
    os.makedirs(out_dir, exist_ok=True)
    for name, text in sorted(artifacts.items()):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(build_manifest(artifacts, config))


def _parser():
    parser = argparse.ArgumentParser(prog="popdyn", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run the experiment described by a config"),
        ("sweep", "run a parameter sweep (mode = 'sweep')"),
        ("verify", "run the bound checker or stationary suite"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="TOML configuration file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--jobs", type=int, help="worker processes (default: available CPUs)")
        p.add_argument("--seed-override", type=int, help="replace the seed list by this single seed")
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if cfg["mode"] not in _COMMAND_MODES[args.command]:
            raise ConfigError(f"mode {cfg['mode']!r} cannot be run with '{args.command}'")
        if args.seed_override is not None:
            if not 0 <= args.seed_override < 2**64:
                raise ConfigError("--seed-override must be a 64-bit unsigned integer")
            cfg["seeds"] = [args.seed_override]
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        out_dir = args.out or cfg["output_dir"]
        log.info("mode %s -> %s", cfg["mode"], out_dir)
        result = run_mode(cfg, jobs=args.jobs)
    except ConfigError as exc:
        print(f"popdyn: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"popdyn: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    if result.failures:
        result.artifacts["failures.json"] = json.dumps(
            {"schema_version": SCHEMA_VERSION, "failures": result.failures}, sort_keys=True, indent=2
        ) + "\n"
    write_artifacts(out_dir, result.artifacts, cfg)
    if result.failures:
        for f in result.failures:
            print(f"popdyn: point {f['point']} seed {f['seed']} failed: {f['error']}", file=sys.stderr)
        return EXIT_NUMERICAL
    log.info("wrote %d artifacts", len(result.artifacts) + 1)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
