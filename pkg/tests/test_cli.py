from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lrf_lab import cli
from lrf_lab.ranker import rank_slate
from lrf_lab.trainer import metric_columns

DEGENERATE_J = (1 - 0.45 ** 10) / (1 - 0.45)


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_missing_config_exit_2(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert "nope.yaml" in capsys.readouterr().err


def test_invalid_config_line_numbered(tmp_path, capsys):
    cfg = write(tmp_path, "iterations: 2\nepsilon: 3\n")
    assert cli.main(["run", "--config", str(cfg)]) == 2
    assert f"{cfg}:2:" in capsys.readouterr().err


def test_zero_iterations_writes_header_only(tmp_path):
    cfg = write(tmp_path, "preset: lrf-vs-ctr\niterations: 0\neval_trajectories: 0\n")
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_rows(out / "metrics.csv")
    assert rows == [metric_columns(1)]
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"config_hash", "seed", "versions"} <= set(manifest)
    assert (out / "snapshot.npz").is_file()


def test_ablation_alias_is_deterministic(tmp_path):
    cfg = write(tmp_path, "preset: ablation-lift\niterations: 3\neval_trajectories: 50\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", str(cfg), "--seed", "5", "--out", str(a)]) == 0
    assert cli.main(["run", "--config", str(cfg), "--seed", "5", "--out", str(b)]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "eval.csv").read_bytes() == (b / "eval.csv").read_bytes()
    assert len(read_rows(a / "metrics.csv")) == 4


def test_constrained_run_columns(tmp_path):
    cfg = write(tmp_path, "preset: constraint-stability\niterations: 3\n")
    out = tmp_path / "r"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    header = read_rows(out / "metrics.csv")[0]
    assert header == metric_columns(2)
    assert "w_2" in header and "corr_2" in header


# ---------------------------------------------------------------- oracle-check

def test_oracle_check_zero_cases(capsys):
    assert cli.cmd_oracle_check(0) == 0
    assert "0/0" in capsys.readouterr().out


def test_oracle_check_small_run(capsys):
    assert cli.main(["oracle-check", "--cases", "50", "--seed", "3"]) == 0
    assert "50/50" in capsys.readouterr().out


def test_oracle_check_negative_cases():
    assert cli.cmd_oracle_check(-1) == 2


def test_oracle_check_catches_injected_bug(capsys):
    from lrf_lab.ranker import SlateBeliefs

    def buggy(sb, w):
        # drops the abandonment term from the ratio
        return rank_slate(SlateBeliefs(sb.p_clk, np.zeros_like(sb.p_abd), sb.r_lift, sb.r_abd), w)

    assert cli.cmd_oracle_check(200, seed=1, rank_fn=buggy) == 1
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if l.startswith("first failing instance: "))
    failure = json.loads(line.split(": ", 1)[1])
    from lrf_lab.oracle import instance_from_json
    from lrf_lab.ranker import brute_force_best, slate_value
    sb, w = instance_from_json(json.dumps(failure["instance"]))
    assert slate_value(sb, buggy(sb, w), w) < brute_force_best(sb, w)[1] - 1e-9


# ---------------------------------------------------------------- eval

@pytest.fixture
def degenerate_run(tmp_path):
    cfg = write(tmp_path, "preset: degenerate\n")
    out = tmp_path / "deg"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_degenerate_eval_matches_closed_form(degenerate_run, capsys):
    cfg, out = degenerate_run
    dest = out / "again.csv"
    assert cli.main(["eval", "--snapshot", str(out / "snapshot.npz"), "--config", str(cfg),
                     "--trajectories", "16", "--out", str(dest)]) == 0
    rows = read_rows(dest)
    assert rows[0][:2] == ["objective", "platform_mean"]
    assert float(rows[1][1]) == pytest.approx(DEGENERATE_J, abs=1e-6)
    assert float(read_rows(out / "eval.csv")[1][1]) == pytest.approx(DEGENERATE_J, abs=1e-6)


def test_eval_single_trajectory_reports_wide_error(degenerate_run, tmp_path):
    cfg, out = degenerate_run
    lrf = write(tmp_path, "preset: lrf-vs-ctr\niterations: 1\neval_trajectories: 0\n", "l.yaml")
    run = tmp_path / "lrf"
    assert cli.main(["run", "--config", str(lrf), "--out", str(run)]) == 0
    dest = tmp_path / "one.csv"
    assert cli.main(["eval", "--snapshot", str(run / "snapshot.npz"), "--config", str(lrf),
                     "--trajectories", "1", "--out", str(dest)]) == 0
    assert read_rows(dest)[1][2] == "inf"


def test_eval_mismatched_snapshot_exit_2(degenerate_run, tmp_path, capsys):
    _, out = degenerate_run
    other = write(tmp_path, "preset: lrf-vs-ctr\n", "o.yaml")
    assert cli.main(["eval", "--snapshot", str(out / "snapshot.npz"),
                     "--config", str(other)]) == 2
    assert "does not match" in capsys.readouterr().err


def test_eval_unreadable_snapshot_exit_2(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a snapshot")
    cfg = write(tmp_path, "preset: degenerate\n")
    assert cli.main(["eval", "--snapshot", str(bad), "--config", str(cfg)]) == 2


# ---------------------------------------------------------------- plot

def test_plot_writes_images(degenerate_run, tmp_path):
    pytest.importorskip("matplotlib")
    _, out = degenerate_run
    cfg = write(tmp_path, "preset: constraint-stability\niterations: 2\n", "cs.yaml")
    run = tmp_path / "cs"
    assert cli.main(["run", "--config", str(cfg), "--out", str(run)]) == 0
    pngs = tmp_path / "png"
    assert cli.main(["plot", "--metrics", str(run / "metrics.csv"), "--out", str(pngs)]) == 0
    names = {p.name for p in pngs.iterdir()}
    assert {"losses.png", "returns.png", "weights.png"} <= names
    assert all(p.read_bytes()[:4] == b"\x89PNG" for p in pngs.iterdir())


def test_plot_missing_metrics(tmp_path):
    pytest.importorskip("matplotlib")
    assert cli.main(["plot", "--metrics", str(tmp_path / "x.csv"), "--out", str(tmp_path)]) == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "lrf_lab.cli", "oracle-check", "--cases", "5"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "5/5" in res.stdout
