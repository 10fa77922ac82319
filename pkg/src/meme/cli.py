"""Command-line entry point: ``meme train | summarize | verify``.

Exit codes: 0 ok, 1 usage or invalid config, 2 runtime failure (including a
failed verification suite).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .mixture import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

log = logging.getLogger("meme")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# flag -> (section.key, converter); None values are left to the config
TRAIN_FLAGS = {
    "env": "env.name",
    "size": "env.size",
    "env_seed": "env.seed",
    "scale": "env.scale",
    "frames": "runtime.frames",
    "seed": "runtime.seed",
    "runtime_mode": "runtime.mode",
    "actors": "runtime.n_actors",
    "estimator": "returns.estimator",
    "loss_mode": "loss.mode",
    "eta": "loss.eta",
    "bootstrap": "loss.bootstrap",
    "spi": "replay.spi",
    "beta_im": "mixtures.beta_im",
}
TOGGLES = {"no_trust_region": "loss.trust_region", "no_normalize": "loss.normalize",
           "no_distill": "loss.distill"}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meme", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run one training job and write metrics + summary")
    t.add_argument("--config", help="YAML config file")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="config override, repeatable; wins over file and environment")
    t.add_argument("--out", default="runs/latest", help="output directory")
    t.add_argument("--env")
    t.add_argument("--size", type=int)
    t.add_argument("--env-seed", type=int)
    t.add_argument("--scale", type=float)
    t.add_argument("--frames", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--runtime-mode", choices=("sync", "threaded"))
    t.add_argument("--actors", type=int)
    t.add_argument("--estimator")
    t.add_argument("--loss-mode")
    t.add_argument("--eta", type=float)
    t.add_argument("--bootstrap", choices=("online", "target"))
    t.add_argument("--spi", type=float)
    t.add_argument("--beta-im", type=float)
    t.add_argument("--no-trust-region", action="store_true")
    t.add_argument("--no-normalize", action="store_true")
    t.add_argument("--no-distill", action="store_true")
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    s = sub.add_parser("summarize", help="AUC / frames-to-threshold table for metrics files")
    s.add_argument("files", nargs="+")
    s.add_argument("--json", action="store_true", help="emit JSON instead of a table")

    v = sub.add_parser("verify", help="run oracle and property suites")
    v.add_argument("suites", nargs="*", default=["all"])
    v.add_argument("--list", action="store_true")
    return p


def train_overrides(args) -> list[str]:
    out = []
    for flag, key in TRAIN_FLAGS.items():
        val = getattr(args, flag)
        if val is not None:
            out.append(f"{key}={val}")
    for flag, key in TOGGLES.items():
        if getattr(args, flag):
            out.append(f"{key}=false")
    return out + list(args.set)


def cmd_train(args) -> int:
    from .envbench import make_env
    from .runtime import Run
    from .summary import eval_curve, summarize_curve

    cfg = C.load(args.config, train_overrides(args))
    if args.print_config:
        print(C.dumps(cfg), end="")
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(C.dumps(cfg), encoding="utf-8")
    if not cfg.runtime.out_dir:
        cfg.runtime.out_dir = str(out)
    metrics_path = out / "metrics.jsonl"
    run = Run(cfg, metrics_path)
    res = run.run()
    optimal = make_env(cfg.env.name, **cfg.env.params()).optimal_return()
    threshold = cfg.runtime.solve_fraction * optimal
    x, y = eval_curve(res.metrics)
    summ = summarize_curve(str(metrics_path), cfg.env.name, x, y, threshold)
    record = {"role": "summary", "env": cfg.env.name, "threshold": threshold, "optimal": optimal,
              "frames": res.frames, "learner_steps": res.learner_steps,
              "frames_to_threshold": summ.frames_to_threshold, "best_eval": res.best_eval,
              "auc": summ.auc, "mean_return": summ.mean_return,
              "median_return": summ.median_return, "solved_at": res.solved_at,
              "samples_per_insert": res.samples / res.inserts if res.inserts else None}
    if res.frames > 0:
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
    (out / "summary.json").write_text(json.dumps(record, indent=2), encoding="utf-8")
    print(json.dumps(record))
    return EXIT_OK


def cmd_summarize(args) -> int:
    from .summary import format_table, summarize_files, to_json

    for f in args.files:
        if not Path(f).is_file():
            raise UsageError(f"no such metrics file: {f}")
    summaries = summarize_files(args.files)
    print(to_json(summaries) if args.json else format_table(summaries))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites

    if args.list:
        print("\n".join(SUITES))
        return EXIT_OK
    try:
        results = run_suites(args.suites)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


COMMANDS = {"train": cmd_train, "summarize": cmd_summarize, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.exception("run failed")
        print(f"failure: {exc!r}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
