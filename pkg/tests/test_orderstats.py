import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lookback import ExactAccumulator, OrderStatAccumulator

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(st.lists(finite, min_size=1, max_size=300), st.integers(0, 10**6))
def test_queries_match_sorting(xs, seed):
    acc = OrderStatAccumulator(capacity=16, seed=seed)
    for x in xs:
        acc.insert(x)
    ref = sorted(xs)
    n = len(ref)
    assert acc.count == n
    assert np.array_equal(acc.sorted_values(), np.array(ref))
    scale = max(1.0, sum(abs(x) for x in xs))
    for j in range(0, n + 1):
        assert abs(acc.sum_top(j) - math.fsum(ref[n - j:])) <= 1e-13 * scale
        assert abs(acc.sum_bottom(j) - math.fsum(ref[:j])) <= 1e-13 * scale
    for j in range(1, n + 1):
        assert acc.kth_largest(j) == ref[n - j]


@given(st.lists(st.integers(0, 3).map(float), min_size=1, max_size=200))
def test_ties(xs):
    acc = OrderStatAccumulator()
    acc.extend(xs)
    ref = sorted(xs, reverse=True)
    for j in range(1, len(xs) + 1):
        assert acc.sum_top(j) == sum(ref[:j])


def test_extend_matches_insert():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=5000)
    a = OrderStatAccumulator(seed=1)
    a.extend(xs)
    b = OrderStatAccumulator(seed=1)
    for x in xs:
        b.insert(x)
    assert np.array_equal(a.sorted_values(), b.sorted_values())
    for j in (1, 17, 2500, 5000):
        assert a.sum_top(j) == pytest.approx(b.sum_top(j), rel=1e-14)
    assert a.comparisons == b.comparisons


def test_growth_past_capacity_and_audit():
    acc = OrderStatAccumulator(capacity=16)
    xs = np.random.default_rng(2).random(10_000)
    acc.extend(xs)
    assert acc.capacity >= 10_000
    assert acc.audit() < 1e-9
    assert acc.sum_top(10_000) == pytest.approx(math.fsum(xs), rel=1e-12)


def test_debug_mode_audits():
    acc = OrderStatAccumulator(debug=True)
    acc.extend(np.arange(3000.0))
    assert acc.max_drift == 0.0


def test_rejects_nonfinite_and_bad_index():
    acc = OrderStatAccumulator()
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(ValueError):
            acc.insert(bad)
    with pytest.raises(ValueError):
        acc.extend([1.0, math.nan])
    acc.insert(1.0)
    with pytest.raises(ValueError):
        acc.sum_top(2)
    with pytest.raises(ValueError):
        acc.kth_largest(0)


def test_depth_stays_logarithmic_with_shared_seed():
    # data drawn from the same seed as the priorities must not degenerate
    seed = 3
    acc = OrderStatAccumulator(seed=seed)
    acc.extend(np.random.default_rng(seed).random(1 << 12))
    visits = []
    for x in np.random.default_rng(seed + 1).random(200):
        acc.insert(float(x))
        visits.append(acc.last_comparisons)
    assert np.mean(visits) < 4 * 12


def test_exact_accumulator_fractions():
    acc = ExactAccumulator()
    vals = [Fraction(1, 3), Fraction(2, 7), Fraction(5, 6), Fraction(1, 3)]
    acc.extend(vals)
    assert acc.sum_top(2) == Fraction(5, 6) + Fraction(1, 3)
    assert acc.sum_bottom(1) == Fraction(2, 7)
    assert acc.kth_largest(4) == Fraction(2, 7)
    assert acc.total == sum(vals)
