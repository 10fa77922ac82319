"""Score-curve summaries of metrics streams.

The area under the score curve uses piecewise-linear interpolation between
evaluation points and the trapezoid rule, then is divided by the largest
area seen for the same environment.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


def read_metrics(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def eval_curve(records: list[dict], role: str = "evaluator") -> tuple[np.ndarray, np.ndarray]:
    pts = [(r["frames"], r["episode_return"]) for r in records
           if r.get("role") == role and r.get("episode_return") is not None]
    if not pts:
        return np.zeros(0), np.zeros(0)
    x, y = np.array(pts, dtype=np.float64).T
    order = np.argsort(x, kind="stable")
    return x[order], y[order]


def auc(frames: np.ndarray, scores: np.ndarray) -> float:
    """Trapezoid area under the piecewise-linear score curve."""
    if len(frames) < 2:
        return 0.0
    return float(np.sum(0.5 * (scores[1:] + scores[:-1]) * np.diff(frames)))


def frames_to_threshold(frames: np.ndarray, scores: np.ndarray, threshold: float):
    hit = np.nonzero(scores >= threshold)[0]
    return int(frames[hit[0]]) if len(hit) else None


@dataclass
class RunSummary:
    name: str
    env: str
    auc: float
    auc_normalized: float
    frames_to_threshold: int | None
    best_return: float | None
    mean_return: float | None
    median_return: float | None
    n_evals: int


def summarize_curve(name: str, env: str, frames, scores, threshold: float | None = None) -> RunSummary:
    frames, scores = np.asarray(frames, float), np.asarray(scores, float)
    has = len(scores) > 0
    return RunSummary(
        name=name, env=env, auc=auc(frames, scores), auc_normalized=float("nan"),
        frames_to_threshold=(frames_to_threshold(frames, scores, threshold)
                             if threshold is not None and has else None),
        best_return=float(scores.max()) if has else None,
        mean_return=float(scores.mean()) if has else None,
        median_return=float(np.median(scores)) if has else None,
        n_evals=int(len(scores)))


def normalize(summaries: list[RunSummary]) -> list[RunSummary]:
    """Divide each AUC by the largest AUC among runs on the same environment."""
    best: dict[str, float] = {}
    for s in summaries:
        best[s.env] = max(best.get(s.env, -np.inf), s.auc)
    for s in summaries:
        top = best[s.env]
        s.auc_normalized = s.auc / top if top > 0 else float("nan")
    return summaries


def normalized_auc(curves: dict, random_return: float, optimal_return: float) -> dict:
    """Max-normalised AUC for curves on the same environment and frame grid.

    Returns are first mapped to (ret - random) / (optimal - random), so a
    uniform-random policy scores 0 and an optimal one 1; each area is then
    divided by the largest area among the curves.
    """
    span = optimal_return - random_return
    areas = {k: auc(np.asarray(x, float), (np.asarray(y, float) - random_return) / span)
             for k, (x, y) in curves.items()}
    top = max(areas.values(), default=0.0)
    return {k: (a / top if top > 0 else float("nan")) for k, a in areas.items()}


def summarize_files(paths: list[str | Path]) -> list[RunSummary]:
    """Pure function of the files. A final ``summary`` record, when present,
    names the environment and solve threshold."""
    out = []
    for p in paths:
        recs = read_metrics(p)
        info = next((r for r in recs if r.get("role") == "summary"), {})
        x, y = eval_curve(recs)
        out.append(summarize_curve(str(p), info.get("env", "unknown"), x, y, info.get("threshold")))
    return normalize(out)


def format_table(summaries: list[RunSummary]) -> str:
    cols = ("name", "env", "auc", "auc_normalized", "frames_to_threshold", "best_return",
            "mean_return", "median_return", "n_evals")

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    rows = [[fmt(getattr(s, c)) for c in cols] for s in summaries]
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


def to_json(summaries: list[RunSummary]) -> str:
    return json.dumps([asdict(s) for s in summaries], indent=2)
