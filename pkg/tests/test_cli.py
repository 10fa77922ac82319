import json
import subprocess
import sys

import numpy as np
import pytest

from meme import summary as S
from meme.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main

from test_runtime import TINY


def tiny_args(*extra):
    return [a for item in TINY for a in ("--set", item)] + list(extra)


def write_metrics(path, frames, scores, env="deep_sea", threshold=None):
    with open(path, "w") as fh:
        for f, s in zip(frames, scores):
            fh.write(json.dumps({"role": "evaluator", "frames": f, "episode_return": s}) + "\n")
        fh.write(json.dumps({"role": "actor", "frames": 1, "episode_return": 99.0}) + "\n")
        if threshold is not None:
            fh.write(json.dumps({"role": "summary", "env": env, "threshold": threshold}) + "\n")
    return path


# -- train ------------------------------------------------------------------------------

def test_train_zero_frames(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--frames", "0", *tiny_args()]) == EXIT_OK
    assert (out / "metrics.jsonl").read_text() == ""
    assert json.loads(capsys.readouterr().out)["frames"] == 0
    assert (out / "config.yaml").exists()


def test_train_small_run_writes_summary(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--out", str(out), "--frames", "400", "--runtime-mode", "sync",
                 "--seed", "1", *tiny_args()])
    assert code == EXIT_OK
    recs = S.read_metrics(out / "metrics.jsonl")
    assert recs[-1]["role"] == "summary" and recs[-1]["frames"] == 400
    assert recs[-1]["env"] == "deep_sea"
    assert json.loads((out / "summary.json").read_text()) == recs[-1]
    (summ,) = S.summarize_files([out / "metrics.jsonl"])
    assert summ.n_evals >= 1


@pytest.mark.parametrize("argv", [
    ["train", "--set", "loss.eta=2.0", "--print-config"],
    ["train", "--set", "loss.nope=1", "--print-config"],
    ["train", "--estimator", "td0", "--print-config"],
])
def test_invalid_config_exits_one(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["fly"], ["train", "--frames", "many"],
                                  ["train", "--runtime-mode", "async"], ["summarize"]])
def test_usage_errors_exit_one(argv):
    assert main(argv) == EXIT_USAGE


def test_bad_config_file_exits_one(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("loss:\n  zeta: 1\n")
    assert main(["train", "--config", str(p), "--print-config"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "missing.yaml"), "--print-config"]) == EXIT_USAGE


def test_print_config_estimator_diff(capsys):
    main(["train", "--estimator", "retrace", "--print-config"])
    a = capsys.readouterr().out.splitlines()
    main(["train", "--estimator", "soft_watkins", "--print-config"])
    b = capsys.readouterr().out.splitlines()
    diff = [(x, y) for x, y in zip(a, b) if x != y]
    assert len(a) == len(b) and len(diff) == 1
    assert "retrace" in diff[0][0] and "soft_watkins" in diff[0][1]


def test_flags_map_to_overrides_and_set_wins(capsys):
    main(["train", "--eta", "0.2", "--no-trust-region", "--beta-im", "0", "--print-config"])
    text = capsys.readouterr().out
    assert "eta: 0.2" in text and "trust_region: false" in text and "beta_im: 0.0" in text
    main(["train", "--eta", "0.2", "--set", "loss.eta=0.7", "--print-config"])
    assert "eta: 0.7" in capsys.readouterr().out


def test_env_var_override(monkeypatch, capsys):
    monkeypatch.setenv("MEME_REPLAY__SPI", "3.0")
    main(["train", "--print-config"])
    assert "spi: 3.0" in capsys.readouterr().out


# -- summarize --------------------------------------------------------------------------

def test_summarize_constant_curve(tmp_path):
    p = write_metrics(tmp_path / "m.jsonl", [0, 100, 250], [2.0, 2.0, 2.0])
    (s,) = S.summarize_files([p])
    assert s.auc == pytest.approx(2.0 * 250)
    assert s.n_evals == 3 and s.auc_normalized == 1.0


def test_summarize_ramp_and_threshold(tmp_path):
    p = write_metrics(tmp_path / "m.jsonl", [0, 50, 100], [0.0, 0.5, 1.0], threshold=0.5)
    (s,) = S.summarize_files([p])
    assert s.auc == pytest.approx(50.0)
    assert s.frames_to_threshold == 50 and s.env == "deep_sea"


def test_summarize_normalizes_per_env(tmp_path):
    a = write_metrics(tmp_path / "a.jsonl", [0, 10], [2.0, 2.0], threshold=1.0)
    b = write_metrics(tmp_path / "b.jsonl", [0, 10], [4.0, 4.0], threshold=1.0)
    c = write_metrics(tmp_path / "c.jsonl", [0, 10], [1.0, 1.0], env="dense_grid", threshold=1.0)
    got = {s.name: s.auc_normalized for s in S.summarize_files([a, b, c])}
    assert got == {str(a): 0.5, str(b): 1.0, str(c): 1.0}


def test_summarize_unsorted_and_empty(tmp_path):
    p = write_metrics(tmp_path / "m.jsonl", [100, 0], [1.0, 3.0])
    x, y = S.eval_curve(S.read_metrics(p))
    assert x.tolist() == [0, 100] and y.tolist() == [3.0, 1.0]
    e = write_metrics(tmp_path / "e.jsonl", [], [])
    (s,) = S.summarize_files([e])
    assert s.auc == 0.0 and s.best_return is None and s.n_evals == 0
    assert np.isnan(s.auc_normalized)


def test_summarize_cli_is_deterministic(tmp_path, capsys):
    p = write_metrics(tmp_path / "m.jsonl", [0, 10, 20], [0.1, 0.4, 0.2], threshold=0.3)
    assert main(["summarize", "--json", str(p)]) == EXIT_OK
    first = capsys.readouterr().out
    main(["summarize", "--json", str(p)])
    assert capsys.readouterr().out == first
    assert json.loads(first)[0]["frames_to_threshold"] == 10
    assert main(["summarize", str(p)]) == EXIT_OK
    assert "auc_normalized" in capsys.readouterr().out


def test_summarize_missing_file_exits_one(tmp_path):
    assert main(["summarize", str(tmp_path / "nope.jsonl")]) == EXIT_USAGE


# -- verify -----------------------------------------------------------------------------

def test_verify_list(capsys):
    assert main(["verify", "--list"]) == EXIT_OK
    names = capsys.readouterr().out.split()
    assert {"returns_oracle", "trust_region", "rescale_roundtrip", "bandit_convergence"} <= set(names)


def test_verify_fast_suites(capsys):
    assert main(["verify", "trust_region", "rescale_roundtrip"]) == EXIT_OK
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [r["name"] for r in lines] == ["trust_region", "rescale_roundtrip"]
    assert all(r["passed"] for r in lines)


def test_verify_unknown_suite_exits_one():
    assert main(["verify", "nonesuch"]) == EXIT_USAGE


def test_verify_failure_exits_two(monkeypatch, capsys):
    from meme import verify as V
    broken = V.SuiteResult("broken", False)
    monkeypatch.setitem(V.SUITES, "broken", lambda: broken)
    assert main(["verify", "broken"]) == EXIT_FAILURE


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "meme", "verify", "--list"],
                         capture_output=True, text=True, timeout=120)
    assert out.returncode == 0 and "returns_oracle" in out.stdout


def test_normalized_auc_anchors():
    x = np.array([0.0, 10.0])
    got = S.normalized_auc({"opt": (x, np.array([2.0, 2.0])), "rand": (x, np.array([-4.0, -4.0])),
                            "half": (x, np.array([-1.0, -1.0]))}, random_return=-4.0,
                           optimal_return=2.0)
    assert got == {"opt": 1.0, "rand": 0.0, "half": 0.5}
    assert np.isnan(S.normalized_auc({"a": (x, np.array([-4.0, -4.0]))}, -4.0, 2.0)["a"])
