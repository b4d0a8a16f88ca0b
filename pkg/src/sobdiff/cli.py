"""Command line entry point: ``python3 -m sobdiff <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from sobdiff import harness as H

COMMANDS = ("collect", "train", "eval", "interplay", "bench", "plot")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sobdiff", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS[:-1]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config; missing fields take the system profile defaults")
        p.add_argument("--system", help="pendulum | double_pendulum | point_mass_2d")
        p.add_argument("--method", help="sob_diff | diff | mlp | sob_mlp | to_only")
        p.add_argument("--name", help="run directory name under $%s" % H.OUT_ENV)
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. train.alpha_sob=0.001 (repeatable)")
        if name == "eval":
            p.add_argument("--sweep", choices=("ta", "k"), help="sweep T_a or K_rollout on the checkpoint")
    p = sub.add_parser("plot")
    p.add_argument("csv", nargs="+", help="bench_summary*, interplay*, hist* or *_sweep_* CSV files")
    p.add_argument("--out-dir", help="defaults to each CSV's directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args) -> H.RunConfig:
    overrides = list(args.set)
    for key in ("method", "name"):
        if getattr(args, key):
            overrides.append(f"{key}={getattr(args, key)}")
    if args.seeds:
        overrides.append("seeds=[%s]" % args.seeds)
    return H.load_config(args.config, args.system, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "plot":
        paths = H.cmd_plot(args.csv, args.out_dir)
    else:
        cfg = config_from_args(args)
        if args.command == "eval":
            paths = H.cmd_eval(cfg, args.sweep)
        else:
            paths = getattr(H, f"cmd_{args.command}")(cfg)
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
