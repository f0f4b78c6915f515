"""Command-line driver: ``lrf-lab run | oracle-check | eval | plot``.

Exit codes: 0 success, 1 runtime or check failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, _kernels
from .config import ConfigError, ExperimentConfig, load_config
from .constraint import WeightVector
from .domain import ValidationError
from .models import Architecture, SnapshotMismatch, load_params, read_descriptor, save_params
from .oracle import run_oracle_suite
from .ranker import rank_slate
from .simulator import init_world
from .trainer import PolicySnapshot, evaluate_policy, metric_columns, run_algorithm1, \
    run_algorithm2, run_loop

log = logging.getLogger("lrf_lab")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    x = float(value)
    return "" if math.isnan(x) else repr(x)


def write_metrics_csv(path: Path, rows: Sequence[dict], m: int) -> None:
    cols = metric_columns(m)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in cols])


def code_version() -> str:
    digest = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".yaml") and "__pycache__" not in p.parts:
            digest.update(p.relative_to(root).as_posix().encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


def _arch_for(cfg: ExperimentConfig) -> Architecture:
    variant = {"no_lift": "no_lift", "two_model": "two_model"}.get(cfg.policy, "lift")
    d = cfg.world.feature_dim
    return Architecture(d, d, cfg.world.m, cfg.final_hidden, variant)


def execute(cfg: ExperimentConfig):
    gt = init_world(cfg.world)
    loop = cfg.loop_config()
    if cfg.algorithm == 2:
        return run_algorithm2(gt, loop, cfg.targets, cfg.iterations)
    if cfg.world.m == 1:
        return run_algorithm1(gt, loop, cfg.iterations)
    return run_loop(gt, loop, cfg.iterations)


def _write_eval_csv(path: Path, ev, m: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["objective", "platform_mean", "platform_se", "surface_mean",
                         "surface_se", "trajectories"])
        for i in range(m):
            writer.writerow([i + 1, _fmt(ev.platform_mean[i]), _fmt(ev.platform_se[i]),
                             _fmt(ev.surface_mean[i]), _fmt(ev.surface_se[i]),
                             ev.num_trajectories])


def _print_eval(ev, m: int) -> None:
    for i in range(m):
        print(f"J[{i + 1}] platform {ev.platform_mean[i]:.6f} +/- {ev.platform_se[i]:.6f}  "
              f"surface {ev.surface_mean[i]:.6f} +/- {ev.surface_se[i]:.6f}")


def cmd_run(config: str, seed: int | None = None, out: str | None = None) -> int:
    try:
        cfg = load_config(config, seed=seed, output_dir=out)
    except ConfigError as exc:
        print(f"error: {exc.render()}", file=sys.stderr)
        return EXIT_USAGE
    try:
        out_dir = Path(cfg.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        snapshot, metrics = execute(cfg)
        write_metrics_csv(out_dir / "metrics.csv", metrics, cfg.world.m)
        save_snapshot(out_dir / "snapshot.npz", snapshot)
        manifest = {
            "config_hash": cfg.config_hash(),
            "config": cfg.raw,
            "seed": cfg.seed,
            "preset": cfg.preset,
            "iterations": cfg.iterations,
            "versions": {"lrf_lab": __version__, "code_sha256": code_version(),
                         "numpy": np.__version__, "python": platform.python_version(),
                         "kernels": "numba" if _kernels.USE_NUMBA else "numpy"},
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                          default=str) + "\n")
        if cfg.eval_trajectories > 0:
            ev = evaluate_policy(init_world(cfg.world), snapshot, cfg.eval_trajectories,
                                 np.random.default_rng([cfg.seed, 99]))
            _print_eval(ev, cfg.world.m)
            _write_eval_csv(out_dir / "eval.csv", ev, cfg.world.m)
        print(f"wrote {out_dir / 'metrics.csv'} ({len(metrics)} iterations)")
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def save_snapshot(path: Path, snapshot: PolicySnapshot) -> None:
    save_params(path, snapshot.params, extra={
        "weights": snapshot.weights.w.tolist(), "epsilon": snapshot.epsilon,
        "score_kind": snapshot.score_kind, "drop_abandon_value": snapshot.drop_abandon_value})


def load_snapshot(path: Path, expected: Architecture | None = None) -> PolicySnapshot:
    params = load_params(path, expected)
    extra = read_descriptor(path).get("extra", {})
    weights = WeightVector(extra.get("weights", WeightVector.initial(params.arch.m).w))
    return PolicySnapshot(params, weights, float(extra.get("epsilon", 0.0)),
                          extra.get("score_kind", "cascade"),
                          bool(extra.get("drop_abandon_value", False)))


def cmd_oracle_check(cases: int = 1000, seed: int = 0,
                     rank_fn: Callable = rank_slate) -> int:
    if cases < 0:
        print("error: --cases must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    report = run_oracle_suite(cases, seed, rank_fn)
    print(f"ratio rule vs brute force: {report.rank_pass}/{report.cases} passed")
    print(f"cascade normalization: {report.norm_pass}/{report.cases} passed")
    if not report.ok:
        if report.first_failure:
            print(f"first failing instance: {report.first_failure}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_eval(snapshot: str, config: str, trajectories: int = 2000,
             out: str | None = None, seed: int | None = None) -> int:
    try:
        cfg = load_config(config, seed=seed)
    except ConfigError as exc:
        print(f"error: {exc.render()}", file=sys.stderr)
        return EXIT_USAGE
    if trajectories < 1:
        print("error: --trajectories must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        snap = load_snapshot(Path(snapshot), _arch_for(cfg))
    except SnapshotMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read snapshot {snapshot}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ev = evaluate_policy(init_world(cfg.world), snap, trajectories,
                         np.random.default_rng([cfg.seed, 99]))
    _print_eval(ev, cfg.world.m)
    dest = Path(out) if out else Path(snapshot).with_name("eval.csv")
    try:
        _write_eval_csv(dest, ev, cfg.world.m)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"wrote {dest}")
    return EXIT_OK


PLOT_GROUPS = {
    "losses": ("loss_",),
    "returns": ("j_platform_", "j_surface_"),
    "weights": ("w_",),
    "correlations": ("corr_",),
}


def cmd_plot(metrics: str, out: str) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(metrics)
    if not path.is_file():
        print(f"error: metrics file not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0].keys()) if rows else []
    x = [int(r["iteration"]) for r in rows]
    written = 0
    for group, prefixes in PLOT_GROUPS.items():
        series = [c for c in cols if c.startswith(prefixes)]
        series = [c for c in series if any(r[c] != "" for r in rows)]
        if not series:
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for c in series:
            ax.plot(x, [float(r[c]) if r[c] != "" else float("nan") for r in rows], label=c)
        ax.set_xlabel("iteration")
        ax.set_title(group)
        ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(out_dir / f"{group}.png", dpi=100)
        plt.close(fig)
        written += 1
    print(f"wrote {written} plot(s) to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrf-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train a ranking policy and write metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("oracle-check", help="ratio rule vs brute force on random slates")
    p.add_argument("--cases", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="Monte Carlo J estimate of a saved snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--trajectories", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("plot", help="render metric curves to PNG files")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.seed, args.out)
    if args.command == "oracle-check":
        return cmd_oracle_check(args.cases, args.seed)
    if args.command == "eval":
        return cmd_eval(args.snapshot, args.config, args.trajectories, args.out, args.seed)
    return cmd_plot(args.metrics, args.out)


if __name__ == "__main__":
    sys.exit(main())
