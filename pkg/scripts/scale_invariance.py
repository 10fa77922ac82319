"""Greedy policy after equal budgets on deep_sea at reward scale 1 and a small scale.

    python3 scripts/scale_invariance.py --scale 1e-3 --seeds 0 1 2
"""

import argparse
import json

from meme import experiments as X


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--scale", type=float, default=1e-3)
    p.add_argument("--frames", type=int, default=200_000)
    p.add_argument("--size", type=int, default=6)
    p.add_argument("--no-normalize", action="store_true", help="turn N2 normalisation off in both arms")
    args = p.parse_args()
    extra = ["loss.normalize=false"] if args.no_normalize else []
    for seed in args.seeds:
        a, b = X.scale_pair(seed, args.scale, args.frames, args.size, extra=extra)
        print(json.dumps({"seed": seed, "same_policy": a.greedy_actions == b.greedy_actions,
                          "actions_scale_1": a.greedy_actions, "actions_scaled": b.greedy_actions,
                          "solved_at": [a.solved_at, b.solved_at]}), flush=True)


if __name__ == "__main__":
    main()
