import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrieval_lab.flow import (
    initial_state,
    interval_table,
    min_layers,
    min_layers_closed_form,
    step,
    step_bruteforce,
    theorem1_bound,
    trajectory,
)


def sets_oracle(D, t):
    """Piece sets per position, merged with plain Python sets."""
    held = [{0}] + [{i - 1, i} for i in range(1, 2 * D + 1)]
    for _ in range(t):
        held = [set().union(*(b for b in held if a & b)) for a in held]
    return held


def test_initial_state():
    assert initial_state(1).intervals == [(0, 0), (0, 1), (1, 2)]
    s = initial_state(5)
    assert len(s.intervals) == 11
    for (a0, b0), (a1, b1) in zip(s.intervals, s.intervals[1:]):
        assert len(set(range(a0, b0 + 1)) & set(range(a1, b1 + 1))) == 1
    with pytest.raises(ValueError):
        initial_state(0)


def test_small_steps():
    s1 = step(initial_state(1))
    assert s1.intervals[0] == (0, 1)
    s2 = step(s1)
    assert s2.intervals[0] == (0, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(0, 6))
def test_step_matches_set_oracle_and_bruteforce(D, t):
    fast = slow = initial_state(D)
    for _ in range(t):
        fast, slow = step(fast), step_bruteforce(slow)
    assert np.array_equal(fast.lo, slow.lo) and np.array_equal(fast.hi, slow.hi)
    assert [set(range(a, b + 1)) for a, b in fast.intervals] == sets_oracle(D, t)
    fast.check()


def test_lengths_bounded_and_interior_exact():
    for D in (1, 7, 100, 1000):
        s = initial_state(D)
        for t in range(11):
            assert s.lengths().max() <= 3**t + 1
            if 3**t + 1 < D:
                assert s.lengths()[D] == 3**t + 1
            s = step(s)


def test_min_layers_examples():
    assert min_layers(1) == 2
    assert min_layers(4) == 3 == math.ceil(math.log(4 * 4 + 1, 3))


def test_closed_form_and_bound():
    for D in range(1, 501):
        assert min_layers(D) == min_layers_closed_form(D)
    assert theorem1_bound(1) == 1
    assert theorem1_bound(5) == 3
    assert theorem1_bound(13) == 3 and theorem1_bound(14) == 4
    for D in np.unique(np.geomspace(1, 10**6, 400).astype(int)):
        assert min_layers_closed_form(int(D)) >= theorem1_bound(int(D))


def test_idempotent_when_saturated():
    s = trajectory(6, 20)[-1]
    while not (s.lo == 0).all() or not (s.hi == 12).all():
        s = step(s)
    n = step(s)
    assert np.array_equal(n.lo, s.lo) and np.array_equal(n.hi, s.hi)


def test_interval_table_rows():
    rows = interval_table(2)
    assert rows[0] == {"t": 0, "position": 0, "lo": 0, "hi": 0}
    assert len(rows) == 5 * (min_layers(2) + 1)
