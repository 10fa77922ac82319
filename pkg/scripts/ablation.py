"""Full agent vs trust region off + target-network bootstrapping, by normalised AUC.

    python3 scripts/ablation.py --seeds 0 1 2 --frames 100000
"""

import argparse
import json

from meme import experiments as X


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--frames", type=int, default=100_000)
    args = p.parse_args()
    wins = 0
    for seed in args.seeds:
        s = X.ablation_seed(seed, frames=args.frames)
        wins += s["full"] >= s["ablated"]
        print(json.dumps({"seed": seed, **s}), flush=True)
    print(json.dumps({"full_at_least_ablated": wins, "seeds": len(args.seeds)}))


if __name__ == "__main__":
    main()
