import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lookback import (
    EnvelopeParams,
    PrefixProfile,
    check_dominance_propagation,
    check_reverse_majorization,
    collapse_top_m,
    majorizes,
)

PARAMS = EnvelopeParams(0.5, 0.5, 0.5, 0.5)
unit = st.floats(0, 1, allow_nan=False)


def test_majorizes_examples():
    assert majorizes([3.0, 0.0], [2.0, 1.0])
    assert not majorizes([2.0, 1.0], [3.0, 0.0])
    # totals need not agree
    assert majorizes([2.0, 2.0], [1.0, 1.0])
    assert not majorizes([1.0, 1.0], [2.0, 0.0])
    with pytest.raises(ValueError):
        majorizes([1.0], [1.0, 2.0])


def test_majorizes_exact_path():
    a = [Fraction(1, 3), Fraction(2, 3)]
    b = [Fraction(1, 2), Fraction(1, 2)]
    assert majorizes(a, b)
    assert not majorizes(b, a)
    # a difference far below any float slack is still detected
    c = [Fraction(2, 3) + Fraction(1, 10**30), Fraction(1, 3)]
    assert not majorizes(a, c)


@given(st.lists(unit, min_size=1, max_size=60), st.data())
def test_nonnegative_shift_dominates(b, data):
    shift = data.draw(st.lists(unit, min_size=len(b), max_size=len(b)))
    a = [x + y for x, y in zip(b, shift)]
    assert majorizes(a, b)


@given(st.lists(unit, min_size=2, max_size=60), st.data())
def test_collapse_is_dominated_by_original(a, data):
    m = data.draw(st.integers(1, len(a)))
    c = collapse_top_m(a, m)
    assert np.isclose(np.sum(c), np.sum(a), rtol=1e-12, atol=1e-12)
    assert majorizes(a, c)
    top = np.sort(a)[::-1][:m]
    assert np.allclose(np.sort(c)[::-1][:m], np.mean(top))


def test_collapse_exact_and_cap():
    a = [Fraction(1), Fraction(0), Fraction(1, 2)]
    assert collapse_top_m(a, 2) == [Fraction(3, 4), Fraction(0), Fraction(3, 4)]
    with pytest.raises(ValueError):
        collapse_top_m([1.0, 2.0, 3.0, 4.0], 3, delta_k=0.5)


def test_prefix_profile():
    p = PrefixProfile.of([1.0, 3.0, 2.0])
    assert np.array_equal(p.prefix, [3.0, 5.0, 6.0])
    assert p.total == 6.0
    assert p.is_concave()


def test_dominance_propagation_holds():
    rng = np.random.default_rng(0)
    b = rng.random(60)
    a = b + rng.random(60) * 0.2
    rep = check_dominance_propagation(a, b, PARAMS, 2000, seed=3)
    assert rep.ok
    assert rep.max_prefix_deficit <= 0
    assert json.loads(rep.to_json())["ok"] is True


def test_dominance_propagation_precondition():
    with pytest.raises(ValueError):
        check_dominance_propagation([0.0] * 20, [1.0] * 20, PARAMS, 100)


def test_dominance_detects_swapped_rules():
    # b under the max rule, a under a min-heavy rule: a no longer dominates
    # once the traces grow, so running the check with the roles reversed fails
    rng = np.random.default_rng(1)
    a = rng.random(40)
    rep = check_dominance_propagation(a, a.copy(), PARAMS, 500, lam=0.0)
    assert rep.ok
    b = np.sort(a)
    b[-5:] += 0.01
    with pytest.raises(ValueError):
        check_dominance_propagation(a, b, PARAMS, 500)


def test_reverse_majorization_identity_under_guard():
    rng = np.random.default_rng(2)
    k = 200
    m = int(PARAMS.delta(k) * k)
    a = rng.permutation(np.concatenate([rng.random(k - m), rng.uniform(9.9, 10, m)]))
    rep = check_reverse_majorization(a, m, PARAMS, 3000)
    assert rep.ok
    assert rep.checked_until > k
    assert rep.max_abs_diff <= 1e-10


def test_reverse_majorization_rejects_large_m():
    a = np.random.default_rng(0).random(100)
    with pytest.raises(ValueError):
        check_reverse_majorization(a, 90, PARAMS, 500)
