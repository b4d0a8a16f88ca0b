"""Cost of a trained pendulum policy when sampling with K_rollout = 1..K denoising steps.

    python3 scripts/reduced_steps.py --set n_traj=8
"""

import argparse

from sobdiff import harness as H


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("system", nargs="?", default="pendulum")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    cfg = H.load_config(None, args.system, [f"name=ksweep_{args.system}"] + args.set)
    H.cmd_collect(cfg)
    H.cmd_train(cfg)
    paths = H.cmd_eval(cfg, sweep="k")
    paths += H.cmd_plot(paths)
    for p in paths:
        print(p)


if __name__ == "__main__":
    main()
