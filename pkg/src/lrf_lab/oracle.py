"""Randomized agreement checks between the ratio ranking rule and exhaustive search."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cascade import click_position_probs_batch
from .constraint import WeightVector
from .ranker import SlateBeliefs, brute_force_best, rank_slate, slate_value

VALUE_TOL = 1e-9
NORM_TOL = 1e-12


def random_probs(rng: np.random.Generator, n: int, edge_rate: float = 0.3):
    """Per-item (p_clk, p_abd), with some items at p_clk + p_abd of exactly 0 or 1."""
    p = rng.dirichlet(np.ones(3), size=n)
    p_clk, p_abd = p[:, 0].copy(), p[:, 1].copy()
    kind = rng.random(n)
    zero = kind < edge_rate / 2
    p_clk[zero] = 0.0
    p_abd[zero] = 0.0
    one = (kind >= edge_rate / 2) & (kind < edge_rate)
    split = rng.random(n)
    p_clk[one] = split[one]
    p_abd[one] = 1.0 - split[one]
    return p_clk, p_abd


def random_instance(rng: np.random.Generator, n_range=(2, 6), m_range=(1, 3),
                    lift_range=(-5.0, 5.0)):
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    m = int(rng.integers(m_range[0], m_range[1] + 1))
    p_clk, p_abd = random_probs(rng, n)
    lift = rng.uniform(*lift_range, size=(n, m))
    r_abd = rng.uniform(*lift_range, size=m)
    w = np.concatenate(([1.0], rng.uniform(-2.0, 2.0, size=m - 1)))
    return SlateBeliefs(p_clk, p_abd, lift, r_abd), WeightVector(w)


def instance_to_json(sb: SlateBeliefs, w: WeightVector) -> str:
    return json.dumps({"p_clk": sb.p_clk.tolist(), "p_abd": sb.p_abd.tolist(),
                       "r_lift": sb.r_lift.tolist(), "r_abd": sb.r_abd.tolist(),
                       "w": w.w.tolist()})


def instance_from_json(text: str) -> tuple[SlateBeliefs, WeightVector]:
    d = json.loads(text)
    return SlateBeliefs(d["p_clk"], d["p_abd"], d["r_lift"], d["r_abd"]), WeightVector(d["w"])


@dataclass
class OracleReport:
    cases: int = 0
    rank_pass: int = 0
    norm_pass: int = 0
    first_failure: str | None = None
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.rank_pass == self.cases and self.norm_pass == self.cases


def run_oracle_suite(cases: int, seed: int = 0,
                     rank_fn: Callable = rank_slate) -> OracleReport:
    """Compare ``rank_fn`` against exhaustive search on ``cases`` random instances.

    Each case also checks that the cascade outcome probabilities of the chosen
    order sum to one.
    """
    rng = np.random.default_rng(seed)
    report = OracleReport(cases=cases)
    for k in range(cases):
        sb, w = random_instance(rng)
        perm = rank_fn(sb, w)
        got = slate_value(sb, perm, w)
        _, best = brute_force_best(sb, w)
        probs = click_position_probs_batch(sb.p_clk[perm.order][None], sb.p_abd[perm.order][None])
        if abs(probs.sum() - 1.0) <= NORM_TOL:
            report.norm_pass += 1
        if abs(got - best) <= VALUE_TOL:
            report.rank_pass += 1
        else:
            failure = {"case": k, "seed": seed, "ranked_value": got, "best_value": best,
                       "instance": json.loads(instance_to_json(sb, w))}
            report.failures.append(failure)
            if report.first_failure is None:
                report.first_failure = json.dumps(failure)
    return report
