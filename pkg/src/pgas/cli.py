"""Command-line interface: ``pgas run|validate|oracle|version``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import __version__
from .experiments import ConfigError, ExperimentConfig, run_experiment
from .gaussian import Lgssm, exact_smoother

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    parser = _Parser(prog="pgas", description="Particle Gibbs experiments and exact smoothing.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("--config", required=True, help="experiment config (JSON)")
    run.add_argument("--seed", type=int, action="append",
                     help="override the config seeds (repeatable)")
    run.add_argument("--output", help="override the config output directory")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("--config", required=True)

    orc = sub.add_parser("oracle", help="exact smoothing of a dataset under a linear system")
    orc.add_argument("--system", required=True, help="system JSON (as written by the harness)")
    orc.add_argument("--data", required=True,
                     help="CSV with observation columns named obs_*, one row per time step")
    orc.add_argument("--output", help="write smoothed means/variances here instead of stdout")

    sub.add_parser("version", help="print the package version")
    return parser


def _load_config(args):
    config = ExperimentConfig.from_json(args.config)
    if getattr(args, "seed", None):
        config.seeds = list(args.seed)
    if getattr(args, "output", None):
        config.output_dir = args.output
    config.validate()
    return config


def _read_observations(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    cols = [i for i, h in enumerate(header) if h.startswith("obs")]
    if not cols:
        cols = [i for i, h in enumerate(header) if h != "t"]
    return np.array([[float(r[i]) for i in cols] for r in body])


def _oracle(args, out):
    system = Lgssm.from_json(args.system)
    obs = _read_observations(args.data)
    sm = exact_smoother(system, obs)
    d = system.dim_x
    header = ["t"] + [f"mean_{i}" for i in range(d)] + [f"var_{i}" for i in range(d)]
    fh = open(args.output, "w", newline="", encoding="utf-8") if args.output else out
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(obs.shape[0]):
            w.writerow([t] + [repr(float(v)) for v in sm.means[t]]
                       + [repr(float(v)) for v in np.diag(sm.covs[t])])
    finally:
        if fh is not out:
            fh.close()
    print(f"log-likelihood {sm.filter.log_likelihood!r}", file=sys.stderr)


def main(argv=None, out=None):
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        if args.command == "version":
            print(__version__, file=out)
        elif args.command == "validate":
            config = _load_config(args)
            print(f"{args.config}: valid {config.experiment} config", file=out)
        elif args.command == "run":
            manifest = run_experiment(_load_config(args))
            print(manifest, file=out)
        elif args.command == "oracle":
            _oracle(args, out)
    except (OSError, ConfigError, ValueError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"pgas {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
