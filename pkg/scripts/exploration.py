"""deep_sea exploration with and without intrinsic reward.

    python3 scripts/exploration.py --seeds 0 1 2 --frames 500000 --out runs/exploration
"""

import argparse
import json
from pathlib import Path

from meme import experiments as X


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--frames", type=int, default=500_000)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--out", default="runs/exploration")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for arm, beta in (("intrinsic", None), ("no_intrinsic", 0.0)):
        for seed in args.seeds:
            t = X.exploration(seed, beta_im=beta, frames=args.frames, size=args.size,
                              metrics_path=out / f"{arm}_s{seed}.jsonl")
            row = {"arm": arm, "seed": seed, "solved_at": t.solved_at,
                   "frames": t.result.frames, "seconds": round(t.seconds, 1)}
            print(json.dumps(row), flush=True)
            rows.append(row)
    (out / "results.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
