"""Time the numba and numpy paths of each hot kernel on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 20000]

The first numba call compiles (or loads from cache) and is excluded.
"""

from __future__ import annotations

import argparse
import itertools
import timeit

import numpy as np

from lrf_lab import _kernels


def make_inputs(batch: int, n: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3), size=(batch, n))
    p_clk = np.ascontiguousarray(p[..., 0])
    p_abd = np.ascontiguousarray(p[..., 1])
    lengths = rng.integers(1, 21, size=batch // 10)
    ends = np.cumsum(lengths).astype(np.int64)
    perms = np.array(list(itertools.permutations(range(8))), dtype=np.int64)
    return {
        "cascade_probs": (p_clk, p_abd),
        "sample_cascade": (p_clk, p_abd, rng.random((batch, n))),
        "abandon_prob_grad": (p_clk, p_abd),
        "discounted_returns": (rng.normal(size=(int(ends[-1]), 2)), ends, 0.9),
        "slate_values": (perms, p_clk[0, :8].copy(), p_abd[0, :8].copy(), rng.normal(size=8)),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=20_000)
    ap.add_argument("--n", type=int, default=10)
    args = ap.parse_args(argv)

    if _kernels.numba is None:
        print("numba not installed; nothing to compare")
        return 1
    inputs = make_inputs(args.batch, args.n)
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (nb_fn, np_fn) in _kernels.PAIRS.items():
        a = inputs[name]
        nb_fn(*a)  # compile
        t_np = min(timeit.repeat(lambda: np_fn(*a), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: nb_fn(*a), number=1, repeat=args.repeat))
        print(f"{name:<20} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
