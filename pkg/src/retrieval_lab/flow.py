"""Interval-merge model of information flow under maximal attention.

Positions ``0..2D`` each hold a contiguous run of "pieces" (token embeddings
and positional codes).  Two positions can exchange information only when they
already share a piece; under maximal flow every such exchange happens at every
layer and moves everything.  Position 0 is the query; it must come to hold
piece ``2D`` (the target token) for the problem to be solvable.

Position ``i >= 1`` starts with pieces ``{i-1, i}``; position 0 starts with
only piece 0 because the final token has no positional partner.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

_POW3 = [3**t for t in range(64)]


def _log3_ceil(x: int) -> int:
    """Smallest ``t`` with ``3**t >= x``, exact for any positive integer."""
    while _POW3[-1] < x:
        _POW3.append(_POW3[-1] * 3)
    return bisect_left(_POW3, x)


@dataclass(frozen=True)
class FlowState:
    D: int
    t: int
    lo: np.ndarray  # (2D+1,) inclusive lower piece index
    hi: np.ndarray  # (2D+1,) inclusive upper piece index

    @property
    def intervals(self) -> list[tuple[int, int]]:
        return [(int(a), int(b)) for a, b in zip(self.lo, self.hi)]

    def lengths(self) -> np.ndarray:
        """Number of pieces held per position."""
        return self.hi - self.lo + 1

    def check(self) -> None:
        n = 2 * self.D + 1
        if self.lo.shape != (n,) or self.hi.shape != (n,):
            raise ValueError("interval arrays must have 2D+1 entries")
        if (self.lo > self.hi).any() or self.lo.min() < 0 or self.hi.max() > 2 * self.D:
            raise ValueError("interval out of range")


def initial_state(D: int) -> FlowState:
    if D < 1:
        raise ValueError(f"D must be >= 1, got {D}")
    i = np.arange(2 * D + 1, dtype=np.int64)
    lo = np.maximum(i - 1, 0)
    return FlowState(D, 0, lo, i.copy())


def step(state: FlowState) -> FlowState:
    """One layer of maximal flow: each interval absorbs every interval it touches.

    Both endpoint arrays stay non-decreasing, so the intervals touching
    position ``i`` form a contiguous index range found by binary search.
    """
    lo, hi = state.lo, state.hi
    if (np.diff(lo) < 0).any() or (np.diff(hi) < 0).any():
        return step_bruteforce(state)
    first = np.searchsorted(hi, lo, side="left")  # first j with hi_j >= lo_i
    last = np.searchsorted(lo, hi, side="right") - 1  # last j with lo_j <= hi_i
    return FlowState(state.D, state.t + 1, lo[first], hi[last])


def step_bruteforce(state: FlowState) -> FlowState:
    """Quadratic reference for :func:`step`; also asserts contiguity."""
    lo, hi = state.lo, state.hi
    touch = (lo[None, :] <= hi[:, None]) & (hi[None, :] >= lo[:, None])
    new_lo = np.where(touch, lo[None, :], np.iinfo(np.int64).max).min(axis=1)
    new_hi = np.where(touch, hi[None, :], -1).max(axis=1)
    # the union is contiguous only if the touching intervals chain together
    for i in range(len(lo)):
        covered = np.zeros(2 * state.D + 1, dtype=bool)
        for j in np.flatnonzero(touch[i]):
            covered[lo[j] : hi[j] + 1] = True
        assert covered[new_lo[i] : new_hi[i] + 1].all(), "merged interval is not contiguous"
    return FlowState(state.D, state.t + 1, new_lo, new_hi)


def trajectory(D: int, t_max: int | None = None) -> list[FlowState]:
    """States from ``t=0`` until position 0 holds the target (or ``t_max``)."""
    s = initial_state(D)
    out = [s]
    while s.hi[0] < 2 * D and (t_max is None or s.t < t_max):
        s = step(s)
        out.append(s)
    return out


def min_layers(D: int) -> int:
    """Layers needed before position 0 can hold piece ``2D``, by iteration."""
    return trajectory(D)[-1].t


def min_layers_closed_form(D: int) -> int:
    """Smallest ``t`` with ``(3**t - 1) / 2 >= 2D``, in integers."""
    if D < 1:
        raise ValueError(f"D must be >= 1, got {D}")
    return _log3_ceil(4 * D + 1)


def theorem1_bound(D: int) -> int:
    """``ceil(log3(2D))`` via exact powers of three."""
    if D < 1:
        raise ValueError(f"D must be >= 1, got {D}")
    return _log3_ceil(2 * D)


def interval_table(D: int, t_max: int | None = None) -> list[dict]:
    """Rows ``{t, position, lo, hi}`` for every layer, for dumps and figures."""
    rows = []
    for s in trajectory(D, t_max):
        for i, (a, b) in enumerate(s.intervals):
            rows.append({"t": s.t, "position": i, "lo": a, "hi": b})
    return rows
