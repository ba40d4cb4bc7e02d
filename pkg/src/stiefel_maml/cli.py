"""``stiefel-maml`` command line.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .autodiff import GraphError, NonFiniteError
from .harness import ConfigError, RunConfig, compare_methods, load_config_file, run_experiment
from .meta import METHODS
from .stiefel import ManifoldError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

# flag -> RunConfig field
_FLAGS = {
    "--method": ("method", str),
    "--ways": ("ways", int),
    "--shots": ("shots", int),
    "--query": ("query", int),
    "--inner-steps": ("inner_steps", int),
    "--alpha": ("alpha", float),
    "--beta": ("beta", float),
    "--task-batch": ("task_batch", int),
    "--episodes": ("episodes", int),
    "--eval-every": ("eval_every", int),
    "--eval-tasks": ("eval_tasks", int),
    "--seed": ("seed", int),
    "--dataset": ("dataset", str),
    "--split": ("split", str),
    "--scenario": ("scenario", str),
    "--order": ("order", str),
    "--kernel-mu": ("kernel_mu", float),
    "--kernel-lambda": ("kernel_lambda", float),
    "--hidden": ("hidden", str),
    "--activation": ("activation", str),
    "--graph-budget": ("graph_budget", int),
    "--out": ("out", str),
}


def _add_common(p):
    p.add_argument("--config", metavar="FILE", help="flat key=value file; flags override it")
    for flag, (dest, typ) in _FLAGS.items():
        kw = {"dest": dest, "type": typ, "default": None}
        if flag == "--method":
            kw["choices"] = METHODS
        elif flag == "--order":
            kw["choices"] = ("first", "second")
        elif flag == "--activation":
            kw["choices"] = ("tanh", "relu")
        p.add_argument(flag, **kw)
    p.add_argument("--quiet", action="store_true", help="no progress lines on stderr")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stiefel-maml",
        description="Meta-learning with Stiefel-constrained weights.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="meta-train one method")
    _add_common(run)
    cmp_ = sub.add_parser("compare", help="run several methods on identical tasks")
    _add_common(cmp_)
    cmp_.add_argument("--methods", default="maml,smaml",
                      help="comma-separated methods (default: maml,smaml)")
    return parser


def config_from_args(args):
    values = load_config_file(args.config) if args.config else {}
    for dest, _ in _FLAGS.values():
        v = getattr(args, dest)
        if v is not None:
            values[dest] = v
    return RunConfig.from_mapping(values)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    try:
        config = config_from_args(args)
        if args.command == "run":
            result = run_experiment(config, log=log)
            print(result.metrics_path)
        else:
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            bad = [m for m in methods if m not in METHODS]
            if bad:
                raise ConfigError(f"unknown method(s): {', '.join(bad)}")
            result = compare_methods(config, methods, log=log)
            print(result.path)
            print(result.summary_path.read_text(), end="")
    except OSError as exc:
        print(f"stiefel-maml: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    # LinAlgError and ManifoldError are ValueErrors, so they go first
    except (ArithmeticError, NonFiniteError, GraphError, ManifoldError,
            np.linalg.LinAlgError) as exc:
        print(f"stiefel-maml: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"stiefel-maml: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
