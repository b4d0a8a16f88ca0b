"""Policy cost against dataset size for every method (cold-collected datasets, 5 seeds).

    python3 scripts/sample_efficiency.py pendulum
    python3 scripts/sample_efficiency.py point_mass_2d --set n_eval=20
"""

import argparse

from sobdiff import harness as H


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("system", nargs="?", default="pendulum")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    cfg = H.load_config(None, args.system, [f"name=bench_{args.system}"] + args.set)
    paths = H.cmd_bench(cfg)
    paths += H.cmd_plot([p for p in paths if p.name.startswith("bench_summary")])
    for p in paths:
        print(p)


if __name__ == "__main__":
    main()
