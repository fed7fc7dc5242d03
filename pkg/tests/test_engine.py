import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lookback import (
    EnvelopeParams,
    InvariantViolation,
    LambdaSchedule,
    ProcessTrace,
    TraceCapacityError,
    WeightPolicy,
    affine_map,
    infer_lambda,
    interval_endpoints,
    load_init,
    reconstruct_weights,
    run_schedule,
    step_extremal_max,
    step_extremal_min,
    step_general,
    step_interval,
)
from lookback.engine import default_n_max

PARAMS = EnvelopeParams(0.5, 0.5, 0.5, 0.5)


def _trace(k=40, seed=0, **kw):
    return ProcessTrace(np.random.default_rng(seed).random(k), **kw)


def test_uniform_policy_keeps_mean():
    tr = ProcessTrace([0.0, 1.0, 3.0])
    for _ in range(50):
        step_general(tr, WeightPolicy.uniform())
    assert np.allclose(tr.values[3:], 4 / 3, rtol=0, atol=1e-14)


def test_step_general_rejects_bad_weights():
    tr = ProcessTrace([0.0, 1.0])
    bad = WeightPolicy(lambda n, t: np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        step_general(tr, bad)
    neg = WeightPolicy(lambda n, t: np.array([1.5, -0.5]))
    with pytest.raises(ValueError):
        step_general(tr, neg)


def test_step_general_vector_states():
    tr = ProcessTrace(np.array([[0.0, 1.0], [2.0, 3.0]]))
    step_general(tr, WeightPolicy.point_mass(2))
    assert np.array_equal(tr.values[-1], [2.0, 3.0])
    assert np.array_equal(tr.total, [4.0, 7.0])


def test_interval_endpoints_are_extremal_rules():
    tr = _trace()
    n = tr.n
    eps, delta = PARAMS.eps(n), PARAMS.delta(n)
    lo, hi = interval_endpoints(tr, eps, delta)
    a, b = tr.copy(), tr.copy()
    assert step_extremal_max(a, eps, delta) == hi
    assert step_extremal_min(b, eps, delta) == lo
    c, d = tr.copy(), tr.copy()
    assert step_interval(c, eps, delta, 1.0) == hi
    assert step_interval(d, eps, delta, 0.0) == lo


def test_extremal_max_by_hand():
    tr = ProcessTrace([0.0, 0.0, 1.0, 1.0])
    # m = floor(0.5 * 4) = 2, top mean 1, mean 1/2
    assert step_extremal_max(tr, 0.5, 0.5) == 0.75
    tr = ProcessTrace([0.0, 0.0, 1.0, 1.0])
    assert step_extremal_min(tr, 0.5, 0.5) == 0.25


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0, "iid"])
def test_run_schedule_matches_single_steps(lam):
    k, steps = 30, 400
    tr = _trace(k)
    ref = tr.copy()
    ns = np.arange(k, k + steps, dtype=np.float64)
    eps, delta = PARAMS.eps_array(ns), PARAMS.delta_array(ns)
    lams = (np.random.default_rng(5).random(steps) if lam == "iid"
            else np.full(steps, lam))
    run_schedule(tr, eps, delta, lams)
    for i in range(steps):
        step_interval(ref, eps[i], delta[i], lams[i])
    assert np.allclose(tr.values, ref.values, rtol=1e-14, atol=1e-15)
    assert tr.mean == pytest.approx(ref.mean, rel=1e-14)


def test_run_schedule_check_schedule_reports_excursion():
    tr = _trace(50)
    steps = 100
    eps = np.full(steps, 0.1)
    # frozen eps smaller than the check schedule: max rule leaves the interval
    viol = run_schedule(tr, eps, 0.2, 1.0, check_eps=np.full(steps, 0.5),
                        check_delta=np.full(steps, 0.2))
    assert viol > 0
    tr2 = _trace(50)
    assert run_schedule(tr2, eps, 0.2, 1.0, check_eps=eps, check_delta=0.2) == 0.0


@given(st.integers(12, 200), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_reconstructed_weights(k, lam, seed):
    tr = _trace(k, seed)
    params = EnvelopeParams(0.4, 0.0, 0.3, 0.0)
    eps, delta = params.eps(k), params.delta(k)
    f, c = eps, eps + (1 - eps) / delta
    p = reconstruct_weights(tr, eps, delta, lam, f, c)
    a = tr.values.copy()
    v = step_interval(tr, eps, delta, lam)
    assert abs(math.fsum(p) - 1) <= 1e-12
    assert abs(p @ a - v) <= 1e-12
    assert np.all(p >= f / k * (1 - 1e-12))
    assert np.count_nonzero(p > c / k * (1 + 1e-12)) <= 1


def test_reconstruct_rejects_inconsistent_envelope():
    tr = _trace(20)
    with pytest.raises(ValueError):
        reconstruct_weights(tr, 0.3, 0.2, 0.5, 0.3, 2.0)


@given(st.floats(0, 1), st.integers(0, 1000))
def test_infer_lambda_roundtrip(lam, seed):
    tr = _trace(60, seed)
    eps, delta = 0.3, 0.25
    lo, hi = interval_endpoints(tr, eps, delta)
    x = lo + lam * (hi - lo)
    assert infer_lambda(tr, x, eps, delta) == pytest.approx(lam, abs=1e-9)


def test_infer_lambda_outside():
    tr = _trace(60)
    lo, hi = interval_endpoints(tr, 0.3, 0.25)
    with pytest.raises(ValueError):
        infer_lambda(tr, hi + 1e-3, 0.3, 0.25)


@given(st.floats(-10, 10).filter(lambda s: abs(s) > 1e-3), st.floats(-10, 10))
def test_affine_equivariance(scale, shift):
    k, steps = 25, 60
    tr = _trace(k)
    ns = np.arange(k, k + steps, dtype=np.float64)
    eps, delta = PARAMS.eps_array(ns), PARAMS.delta_array(ns)
    mapped = affine_map(tr, scale, shift)
    run_schedule(tr, eps, delta, 1.0)
    run_schedule(mapped, eps, delta, 1.0 if scale > 0 else 0.0)
    expect = scale * tr.values + shift
    assert np.allclose(mapped.values, expect, rtol=1e-11, atol=1e-11 * (1 + abs(shift)))


def test_exact_trace_matches_float():
    init = [Fraction(j % 3, 2) for j in range(20)]
    ex = ProcessTrace(init, exact=True)
    fl = ProcessTrace([float(x) for x in init])
    for n in range(20, 60):
        e, d = Fraction(1, 3), Fraction(1, 4)
        step_interval(ex, e, d, Fraction(1, 2))
        step_interval(fl, float(e), float(d), 0.5)
    assert all(isinstance(x, Fraction) for x in ex.values)
    assert np.allclose([float(x) for x in ex.values], fl.values, rtol=1e-13)


def test_capacity_and_env_cap(monkeypatch):
    tr = ProcessTrace([0.0, 1.0], n_max=3)
    tr.append(0.5)
    with pytest.raises(TraceCapacityError):
        tr.append(0.5)
    with pytest.raises(TraceCapacityError):
        run_schedule(ProcessTrace([0.0, 1.0], n_max=5), np.full(4, 0.5), 0.5, 1.0)
    monkeypatch.setenv("LOOKBACK_N_MAX", "1e3")
    assert default_n_max() == 1000
    assert ProcessTrace([0.0]).n_max == 1000


def test_nonfinite_terms_raise():
    tr = ProcessTrace([0.0, 1.0])
    with pytest.raises(InvariantViolation):
        tr.append(math.nan)
    with pytest.raises(InvariantViolation):
        tr.extend([0.5, math.inf])
    with pytest.raises(ValueError):
        ProcessTrace([0.0, math.nan])


def test_schedule_range_checked():
    tr = _trace(10)
    with pytest.raises(ValueError):
        step_extremal_max(tr, 0.7, 0.2)
    with pytest.raises(ValueError):
        run_schedule(tr, np.full(3, 0.2), 0.6, 1.0)
    with pytest.raises(ValueError):
        step_interval(tr, 0.2, 0.2, 1.5)


def test_lambda_schedule():
    assert LambdaSchedule.constant(0.25)(10) == 0.25
    s = LambdaSchedule.iid_uniform(seed=1)
    vals = [s(n) for n in range(100)]
    assert all(0 <= v <= 1 for v in vals)
    with pytest.raises(ValueError):
        LambdaSchedule(lambda n: 2.0)(1)


def test_copy_is_independent():
    tr = _trace(30)
    run_schedule(tr, np.full(20, 0.3), 0.3, 1.0)
    cp = tr.copy()
    assert np.array_equal(cp.values, tr.values) and cp.mean == tr.mean
    cp.append(5.0)
    assert tr.n == 50 and cp.n == 51


def test_csv_export_and_load_init(tmp_path):
    tr = ProcessTrace([0.1, 0.2, 0.3])
    text = tr.to_csv(header_lines=["lookback 0.1.0"])
    lines = text.splitlines()
    assert lines[0] == "# lookback 0.1.0" and lines[1] == "n,a_n,mean_n"
    assert lines[2] == "1,0.10000000000000001,0.10000000000000001"
    path = tmp_path / "trace.csv"
    path.write_text(text)
    assert np.array_equal(load_init(str(path)), [0.1, 0.2, 0.3])
    js = tmp_path / "init.json"
    js.write_text('{"init": [1, 2]}')
    assert np.array_equal(load_init(str(js)), [1.0, 2.0])
    assert np.array_equal(load_init("[3, 4]"), [3.0, 4.0])
    with pytest.raises(ValueError):
        load_init(str(tmp_path / "missing.csv"))
