"""Cascade click model with abandonment.

A user inspects the slate top-down. At each position they click with
probability ``p_clk[i]``, abandon with ``p_abd[i]``, and otherwise move on.
Running off the end of the slate counts as abandonment (position 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .domain import ValidationError

PROB_FLOOR = 1e-9
_SUM_TOL = 1e-12


def _check_probs(p_clk: np.ndarray, p_abd: np.ndarray) -> None:
    if p_clk.shape != p_abd.shape:
        raise ValidationError("p_clk and p_abd must have the same shape")
    if not (np.all(np.isfinite(p_clk)) and np.all(np.isfinite(p_abd))):
        raise ValidationError("probabilities must be finite")
    if np.any(p_clk < 0) or np.any(p_clk > 1) or np.any(p_abd < 0) or np.any(p_abd > 1):
        raise ValidationError("probabilities must lie in [0, 1]")
    excess = p_clk + p_abd - 1.0
    if np.any(excess > _SUM_TOL):
        i = int(np.argmax(excess.ravel()))
        raise ValidationError(f"p_clk + p_abd exceeds 1 at position {i + 1}")


@dataclass(frozen=True, eq=False)
class SlateProbs:
    """Inspection-conditional click/abandon probabilities in display order."""

    p_clk: np.ndarray
    p_abd: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.p_clk, dtype=np.float64).ravel()
        d = np.asarray(self.p_abd, dtype=np.float64).ravel()
        if c.size == 0:
            raise ValidationError("slate must contain at least one position")
        _check_probs(c, d)
        c.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "p_clk", c)
        object.__setattr__(self, "p_abd", d)

    @property
    def n(self) -> int:
        return self.p_clk.size


def click_position_probs(sp: SlateProbs) -> np.ndarray:
    """Probability of each outcome: index 0 is abandonment, index i a click at rank i."""
    return _kernels.cascade_probs(sp.p_clk[None, :], sp.p_abd[None, :])[0]


def click_position_probs_batch(p_clk: np.ndarray, p_abd: np.ndarray,
                               validate: bool = True) -> np.ndarray:
    """Vectorized :func:`click_position_probs` over rows of (batch, n) arrays."""
    p_clk = np.ascontiguousarray(p_clk, dtype=np.float64)
    p_abd = np.ascontiguousarray(p_abd, dtype=np.float64)
    if validate:
        _check_probs(p_clk, p_abd)
    return _kernels.cascade_probs(p_clk, p_abd)


def sample_interaction(sp: SlateProbs, rng: np.random.Generator) -> int:
    """Walk the slate once and return the click position (0 = abandoned)."""
    u = rng.random((1, sp.n))
    return int(_kernels.sample_cascade(sp.p_clk[None, :], sp.p_abd[None, :], u)[0])


def sample_interactions(p_clk: np.ndarray, p_abd: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """One sequential walk per row. Draws exactly ``p_clk.size`` uniforms."""
    u = rng.random(p_clk.shape)
    return _kernels.sample_cascade(np.ascontiguousarray(p_clk, dtype=np.float64),
                                   np.ascontiguousarray(p_abd, dtype=np.float64), u)


def log_likelihood(sp: SlateProbs, click_pos: int) -> float:
    if not 0 <= click_pos <= sp.n:
        raise ValidationError(f"click position {click_pos} outside 0..{sp.n}")
    p = click_position_probs(sp)[click_pos]
    return float(np.log(max(p, PROB_FLOOR)))


def log_likelihood_batch(p_clk: np.ndarray, p_abd: np.ndarray,
                         click_pos: np.ndarray) -> np.ndarray:
    probs = _kernels.cascade_probs(np.ascontiguousarray(p_clk, dtype=np.float64),
                                   np.ascontiguousarray(p_abd, dtype=np.float64))
    picked = probs[np.arange(len(click_pos)), click_pos]
    return np.log(np.maximum(picked, PROB_FLOOR))
