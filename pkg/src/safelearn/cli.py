"""Command-line entry point: ``safelearn {explore,evaluate,predict,maps}``.

Exit codes: 0 success, 1 user error (bad configuration, arguments or
checkpoint), 2 internal error.  ``SAFELEARN_THREADS`` sets the number of
worker threads used by the Monte-Carlo oracles.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback

from .campaign import cmd_evaluate, cmd_explore, cmd_maps, cmd_predict
from .config import ConfigError
from .density import ConfigurationError
from .io import CheckpointError

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safelearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required,
                       help="campaign configuration (.cfg or JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("explore", help="run a safe exploration campaign")
    common(p, config_required=True)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("evaluate", help="score learned maps against a Monte-Carlo oracle")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--paths", type=int, default=100)

    p = sub.add_parser("predict", help="predicted density on a position grid")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--theta", type=_floats, default=None,
                   help="comma-separated control, e.g. --theta=-1.05,1.05 (default: initial_theta)")
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--x-low", type=_floats, default=[-10.0, -10.0])
    p.add_argument("--x-high", type=_floats, default=[10.0, 10.0])
    p.add_argument("--resolution", type=int, default=50)

    p = sub.add_parser("maps", help="learned safety/reset maps over the control lattice")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--oracle-paths", type=int, default=100)
    return parser


def _progress(row):
    print(f"iter {row['iteration']:4d}  theta={tuple(round(v, 3) for v in row['theta'])}  "
          f"t={row['t']:.2f}  sigma={row['sigma']:.3f}  gain={row['info_gain']:.3f}",
          file=sys.stderr)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "explore":
            res = cmd_explore(args.config, args.seed, args.out,
                              progress=None if args.quiet else _progress)
        elif args.command == "evaluate":
            res = cmd_evaluate(args.checkpoint, args.config, args.seed, args.out,
                               n_test=args.n_test, paths=args.paths)
        elif args.command == "predict":
            res = cmd_predict(args.checkpoint, args.theta, args.t, args.config, args.seed,
                              args.out, args.x_low, args.x_high, args.resolution)
        else:
            res = cmd_maps(args.checkpoint, args.config, args.seed, args.out,
                           oracle_paths=args.oracle_paths)
    except (UsageError, ConfigError, ConfigurationError, CheckpointError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:  # anything else is a bug or a numerical failure
        traceback.print_exc()
        return EXIT_INTERNAL
    brief = {k: v for k, v in res.summary.items()
             if not isinstance(v, list) or len(v) <= 4}
    print(json.dumps(brief, indent=2, sort_keys=True, default=str))
    if res.status != EXIT_OK and res.summary.get("error"):
        print(res.summary["error"], file=sys.stderr)
    return res.status


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
