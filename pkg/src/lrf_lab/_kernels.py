"""Hot inner loops, each with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``LRF_LAB_NUMBA`` is not set to
a false-ish value (``0``, ``false``, ``no``, ``off``). Both paths compute the
same quantities; the numpy ones are kept vectorized so the fallback is usable,
not just a reference. ``benchmarks/bench_kernels.py`` times them side by side.

All functions take float64 arrays laid out as (batch, slate position).
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _numba_requested() -> bool:
    flag = os.environ.get("LRF_LAB_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = numba is not None and _numba_requested()

if numba is not None:
    _threads = os.environ.get("LRF_LAB_THREADS")
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


def _jit(fn):
    # fastmath stays off: results must match the numpy path to the last ulp
    # wherever the operation order is the same.
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# cascade click probabilities
# --------------------------------------------------------------------------

def cascade_probs_numpy(p_clk: np.ndarray, p_abd: np.ndarray) -> np.ndarray:
    batch, n = p_clk.shape
    out = np.empty((batch, n + 1))
    reach = np.ones((batch, n))
    if n > 1:
        reach[:, 1:] = np.cumprod(1.0 - p_clk[:, :-1] - p_abd[:, :-1], axis=1)
    out[:, 1:] = reach * p_clk
    out[:, 0] = np.maximum(1.0 - out[:, 1:].sum(axis=1), 0.0)
    return out


def _cascade_probs_loop(p_clk, p_abd):
    batch, n = p_clk.shape
    out = np.empty((batch, n + 1))
    for b in range(batch):
        reach = 1.0
        total = 0.0
        for i in range(n):
            pi = reach * p_clk[b, i]
            out[b, i + 1] = pi
            total += pi
            reach *= 1.0 - p_clk[b, i] - p_abd[b, i]
        rest = 1.0 - total
        out[b, 0] = rest if rest > 0.0 else 0.0
    return out


cascade_probs_numba = _jit(_cascade_probs_loop)


# --------------------------------------------------------------------------
# sequential inspect / click / abandon sampling
# --------------------------------------------------------------------------

def sample_cascade_numpy(p_clk: np.ndarray, p_abd: np.ndarray, u: np.ndarray) -> np.ndarray:
    click = u < p_clk
    stop = click | (u < p_clk + p_abd)
    first = np.argmax(stop, axis=1)
    rows = np.arange(p_clk.shape[0])
    stopped = stop[rows, first]
    clicked = stopped & click[rows, first]
    return np.where(clicked, first + 1, 0).astype(np.int64)


def _sample_cascade_loop(p_clk, p_abd, u):
    batch, n = p_clk.shape
    out = np.zeros(batch, dtype=np.int64)
    for b in range(batch):
        for i in range(n):
            x = u[b, i]
            if x < p_clk[b, i]:
                out[b] = i + 1
                break
            if x < p_clk[b, i] + p_abd[b, i]:
                break
    return out


sample_cascade_numba = _jit(_sample_cascade_loop)


# --------------------------------------------------------------------------
# gradient of P(abandon) with respect to per-position click/abandon probs
# --------------------------------------------------------------------------

def abandon_prob_grad_numpy(p_clk: np.ndarray, p_abd: np.ndarray):
    """Returns (P0, dP0/dp_clk, dP0/dp_abd) with continuation = 1 - clk - abd."""
    batch, n = p_clk.shape
    q = 1.0 - p_clk - p_abd
    reach = np.ones((batch, n))
    if n > 1:
        reach[:, 1:] = np.cumprod(q[:, :-1], axis=1)
    # tail[:, j] = P(click somewhere at or after j | j inspected); tail[:, n] = 0
    tail = np.zeros((batch, n + 1))
    for j in range(n - 1, -1, -1):
        tail[:, j] = p_clk[:, j] + q[:, j] * tail[:, j + 1]
    p0 = 1.0 - tail[:, 0]
    d_clk = -reach * (1.0 - tail[:, 1:])
    d_abd = reach * tail[:, 1:]
    return p0, d_clk, d_abd


def _abandon_prob_grad_loop(p_clk, p_abd):
    batch, n = p_clk.shape
    p0 = np.empty(batch)
    d_clk = np.empty((batch, n))
    d_abd = np.empty((batch, n))
    tail = np.empty(n + 1)
    for b in range(batch):
        tail[n] = 0.0
        for j in range(n - 1, -1, -1):
            tail[j] = p_clk[b, j] + (1.0 - p_clk[b, j] - p_abd[b, j]) * tail[j + 1]
        p0[b] = 1.0 - tail[0]
        reach = 1.0
        for j in range(n):
            d_clk[b, j] = -reach * (1.0 - tail[j + 1])
            d_abd[b, j] = reach * tail[j + 1]
            reach *= 1.0 - p_clk[b, j] - p_abd[b, j]
    return p0, d_clk, d_abd


abandon_prob_grad_numba = _jit(_abandon_prob_grad_loop)


# --------------------------------------------------------------------------
# discounted returns over concatenated trajectories
# --------------------------------------------------------------------------

def discounted_returns_numpy(rewards: np.ndarray, ends: np.ndarray, gamma: float) -> np.ndarray:
    """Backward recurrence G_t = r_t + gamma * G_{t+1}, reset after each end.

    ``ends[k]`` is the exclusive end row of trajectory k; trajectories are
    contiguous and ordered.
    """
    out = np.empty_like(rewards)
    start = 0
    for end in ends:
        acc = np.zeros(rewards.shape[1])
        for t in range(end - 1, start - 1, -1):
            acc = rewards[t] + gamma * acc
            out[t] = acc
        start = end
    return out


def _discounted_returns_loop(rewards, ends, gamma):
    out = np.empty_like(rewards)
    m = rewards.shape[1]
    start = 0
    for k in range(ends.shape[0]):
        end = ends[k]
        acc = np.zeros(m)
        for t in range(end - 1, start - 1, -1):
            for c in range(m):
                acc[c] = rewards[t, c] + gamma * acc[c]
                out[t, c] = acc[c]
        start = end
    return out


discounted_returns_numba = _jit(_discounted_returns_loop)


# --------------------------------------------------------------------------
# slate value for many candidate orderings (brute-force oracle)
# --------------------------------------------------------------------------

def slate_values_numpy(perms: np.ndarray, p_clk: np.ndarray, p_abd: np.ndarray,
                       lift: np.ndarray) -> np.ndarray:
    probs = cascade_probs_numpy(p_clk[perms], p_abd[perms])
    return (probs[:, 1:] * lift[perms]).sum(axis=1)


def _slate_values_loop(perms, p_clk, p_abd, lift):
    count, n = perms.shape
    out = np.empty(count)
    for k in range(count):
        reach = 1.0
        total = 0.0
        for i in range(n):
            j = perms[k, i]
            total += reach * p_clk[j] * lift[j]
            reach *= 1.0 - p_clk[j] - p_abd[j]
        out[k] = total
    return out


slate_values_numba = _jit(_slate_values_loop)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def _pick(nb_fn, np_fn):
    return nb_fn if USE_NUMBA else np_fn


cascade_probs = _pick(cascade_probs_numba, cascade_probs_numpy)
sample_cascade = _pick(sample_cascade_numba, sample_cascade_numpy)
abandon_prob_grad = _pick(abandon_prob_grad_numba, abandon_prob_grad_numpy)
discounted_returns = _pick(discounted_returns_numba, discounted_returns_numpy)
slate_values = _pick(slate_values_numba, slate_values_numpy)

PAIRS = {
    "cascade_probs": (cascade_probs_numba, cascade_probs_numpy),
    "sample_cascade": (sample_cascade_numba, sample_cascade_numpy),
    "abandon_prob_grad": (abandon_prob_grad_numba, abandon_prob_grad_numpy),
    "discounted_returns": (discounted_returns_numba, discounted_returns_numpy),
    "slate_values": (slate_values_numba, slate_values_numpy),
}
