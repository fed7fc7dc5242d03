import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lookback import (
    ConstantsLedger,
    EnvelopeParams,
    FloorCeiling,
    block_size,
    load_params,
    min_valid_index,
    reparametrize,
    schedule_at,
)


@given(st.floats(1e-6, 1.0), st.floats(1.0, 1e6))
def test_reparametrize_mass_balance(f, c):
    if c == f:
        return
    eps, delta = reparametrize(f, c)
    assert eps == f
    assert 0 <= delta <= 1
    assert math.isclose(c * delta + f * (1 - delta), 1.0, rel_tol=1e-12)


def test_reparametrize_exact_and_degenerate():
    eps, delta = reparametrize(Fraction(1, 4), Fraction(4))
    assert (eps, delta) == (Fraction(1, 4), Fraction(1, 5))
    assert reparametrize(1.0, 1.0) == (1.0, 1.0)


@pytest.mark.parametrize("f,c", [(0.0, 2.0), (1.5, 2.0), (0.5, 0.9), (0.9, 0.5)])
def test_reparametrize_rejects(f, c):
    with pytest.raises(ValueError):
        reparametrize(f, c)


def test_block_size():
    assert block_size(10, 0.25) == 2
    assert block_size(3, 0.1) == 1
    assert block_size(100, 0.5) == 50


def test_schedules_at_known_points():
    p = EnvelopeParams(1.0, 1.0, 1.0, 1.0)
    n = math.exp(4.0)
    assert p.eps(n) == pytest.approx(0.25, rel=1e-15)
    assert p.delta(n) == pytest.approx(0.25, rel=1e-15)
    q = EnvelopeParams(0.5, 0.0, 0.3, 0.0)
    assert q.eps(10**9) == 0.5 and q.delta(10**9) == 0.3
    ns = np.array([10.0, 100.0, 1000.0])
    assert np.allclose(p.eps_array(ns), [p.eps(x) for x in ns], rtol=1e-15)
    assert np.allclose(p.delta_array(ns), [p.delta(x) for x in ns], rtol=1e-15)


def _brute_n_min(p, upto=10_000):
    def ok(n):
        return (p.eps(n) <= 0.5 and p.delta(n) <= 0.5
                and p.eps(n + 1) * p.delta(n + 1) * (n + 1) > p.eps(n) * p.delta(n) * n)
    for n in range(3, upto):
        if all(ok(m) for m in range(n, n + 200)):
            return n
    raise AssertionError


@pytest.mark.parametrize("args", [(1, 1, 1, 1), (0.5, 0, 0.5, 0), (0.4, 2, 0.3, 1),
                                  (1, 3, 1, 0.5), (0.5, 1, 2, 1)])
def test_min_valid_index_matches_scan(args):
    p = EnvelopeParams(*args)
    assert p.n_min == _brute_n_min(p)
    assert min_valid_index(p) == p.n_min


def test_n_min_frozen_values():
    # eps = 1/log n <= 1/2 first holds at n = 8 (e^2 = 7.39)
    assert EnvelopeParams(1, 1, 1, 1).n_min == 8
    # eps = 2/sqrt(log n) <= 1/2 needs log n >= 16; e^16 = 8886110.52
    assert EnvelopeParams(2, 0.5, 1, 1).n_min == 8886111


def test_schedule_at_rejects_early_index():
    p = EnvelopeParams(1, 1, 1, 1)
    with pytest.raises(ValueError):
        schedule_at(p, 5)
    assert schedule_at(p, 8) == (p.eps(8), p.delta(8))


def test_constant_schedule_above_half_rejected():
    with pytest.raises(ValueError):
        EnvelopeParams(0.6, 0.0, 0.5, 0.0)


def test_params_roundtrip_and_loading(tmp_path):
    p = EnvelopeParams(1.0, 1.0, 1.0, 1.0)
    q = EnvelopeParams.from_dict(p.to_dict())
    assert q == p
    path = tmp_path / "env.json"
    path.write_text(json.dumps(p.to_dict()))
    assert load_params(path) == p
    with pytest.raises(ValueError, match="alpha"):
        EnvelopeParams.from_dict({"A": 1, "B": 1, "beta": 1})


def test_constants_ledger_validation():
    assert ConstantsLedger().to_dict() == {"K": 8.0, "C_big": 8.0, "c_small": 1 / 64}
    ConstantsLedger(C_big=0.0)
    for bad in ({"K": 0.5}, {"C_big": -1.0}, {"c_small": 0.0}, {"c_small": 2.0}):
        with pytest.raises(ValueError):
            ConstantsLedger(**bad)


def test_floor_ceiling_view():
    p = EnvelopeParams(1.0, 1.0, 0.5, 1.0)
    fc = FloorCeiling.from_params(p)
    n = 1000
    assert fc.check(n)
    eps, delta = fc.schedules(n)
    assert eps == pytest.approx(p.eps(n))
    # leading order: delta ~ 1/c(n)
    assert delta == pytest.approx((1 - eps) / (fc.c(n) - eps))
