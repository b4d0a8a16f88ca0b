"""Alternating collection and training on the double pendulum, then the T_a sweep on the final policy.

    python3 scripts/interplay.py --set seeds=[0]
"""

import argparse

from sobdiff import harness as H


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("system", nargs="?", default="double_pendulum")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--no-sweep", action="store_true")
    args = ap.parse_args()
    cfg = H.load_config(None, args.system, [f"name=interplay_{args.system}"] + args.set)
    paths = H.cmd_interplay(cfg)
    if not args.no_sweep:
        paths += H.cmd_eval(cfg, sweep="ta")
    paths += H.cmd_plot(paths)
    for p in paths:
        print(p)


if __name__ == "__main__":
    main()
