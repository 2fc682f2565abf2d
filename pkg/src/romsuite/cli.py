"""``romsuite`` command-line entry point.

Exit codes: 0 on success, 1 on a validation error (bad config, missing or
malformed input, stage run out of order), 2 on a numerical failure (blow-up,
singular system, failed consistency check). Errors are printed to stderr as a
one-line JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import app
from .config import load_config
from .errors import NumericalError, RomsuiteError

COMMANDS = {
    "generate": "simulate the full-order training trajectories",
    "pod": "build temperature and velocity POD bases",
    "build-rom": "assemble Galerkin operators and fit the velocity map",
    "train": "train the memory closure",
    "eval": "score corrected and uncorrected ROMs on the test split",
    "simulate": "roll out closure-corrected trajectories",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="romsuite", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="JSON or YAML workspace config (defaults if omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=50")
        p.add_argument("--seed", type=int, help="override the workspace seed")
        p.add_argument("--quiet", action="store_true", help="only log warnings")
        if name == "simulate":
            p.add_argument("--batch", type=int, help="number of sampled trajectories")
            p.add_argument("--coeffs", help="JSON file with one coefficient record or a list")
    return parser


def _error(exc: Exception, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.command == "generate":
            result = app.cmd_generate(cfg)
            summary = {"n_trajectories": result["n_trajectories"]}
        elif args.command == "pod":
            result = app.cmd_pod(cfg)
            summary = {k: {"rank": result[k]["rank"], "energy_captured": result[k]["energy_captured"]}
                       for k in ("temperature", "velocity")}
        elif args.command == "build-rom":
            result = app.cmd_build_rom(cfg)
            summary = {"ridge_lambda": result["ridge_lambda"],
                       "galerkin_check_max_rel_error": result["galerkin_check_max_rel_error"]}
        elif args.command == "train":
            summary = app.cmd_train(cfg)
        elif args.command == "eval":
            result = app.cmd_eval(cfg)
            summary = {k: result[k] for k in ("mean_nrmse_corrected", "mean_nrmse_uncorrected")}
        else:
            coeffs = app.read_coeff_file(args.coeffs) if args.coeffs else None
            if coeffs is not None and args.batch is not None:
                raise app.ValidationError("give either --coeffs or --batch, not both")
            result = app.cmd_simulate(cfg, coeffs, args.batch)
            summary = {k: result[k] for k in ("n_trajectories", "wall_seconds",
                                              "trajectories_per_second")}
            print(f"wall-clock: {result['wall_seconds']:.3f} s for {result['n_trajectories']} "
                  f"trajectories ({result['trajectories_per_second']:.1f} trajectories/s)")
    except NumericalError as exc:
        return _error(exc, 2)
    except (RomsuiteError, ValueError, KeyError, OSError) as exc:
        return _error(exc, 1)
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
