import json
import math

import numpy as np
import pytest

from lookback import (
    ConstantsLedger,
    EnvelopeParams,
    certify_convergence_schedule,
    check_lower_bound_growth,
    construct_divergence,
    convergence_stage_map,
    divergence_stage_map,
    run_aux_bound,
    series_dichotomy,
    solve_next_stage_index,
)
from lookback.engine import TraceCapacityError

LEDGER = ConstantsLedger()
FLAT = EnvelopeParams(0.5, 0.0, 0.5, 0.0)


# ---------------------------------------------------------------------------
# next stage index

def test_next_stage_flat_schedule_closed_form():
    # eps^2 delta^3 = 1/32, so m >= 32 * n_T * K^2 / gap^2
    assert solve_next_stage_index(10, 1.0, FLAT, LEDGER).n == 20480
    assert solve_next_stage_index(10, 0.5, FLAT, LEDGER).n == 81920
    assert solve_next_stage_index(10, 1.0, FLAT, ConstantsLedger(K=1)).n == 320


def _direct_next(n_T, gap, p, K):
    """Integer bisection on m eps_m^2 delta_m^3 >= n_T K^2 / gap^2 (no logs)."""
    target = n_T * K * K / (gap * gap)

    def ok(m):
        return m * p.eps(m) ** 2 * p.delta(m) ** 3 >= target

    lo, hi = n_T, 2 * n_T
    while not ok(hi):
        lo, hi = hi, 2 * hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


@pytest.mark.parametrize("n_T,gap", [(100, 1.0), (100, 0.3), (5000, 0.9), (10**4, 0.2)])
def test_next_stage_matches_direct_search(n_T, gap):
    p = EnvelopeParams(1, 1, 1, 1)
    led = ConstantsLedger(K=2)
    sol = solve_next_stage_index(n_T, gap, p, led)
    assert sol.n == _direct_next(n_T, gap, p, 2)
    assert sol.residual >= 0
    assert abs(sol.log_n - math.log(sol.n)) < 1e-6 * sol.log_n + 1 / sol.n


def test_next_stage_log_space_and_errors():
    p = EnvelopeParams(1, 1, 1, 1)
    sol = solve_next_stage_index(None, 0.5, p, LEDGER, log_n_T=2000.0)
    assert sol.n is None and sol.log_n > 2000
    with pytest.raises(ValueError):
        solve_next_stage_index(10, 1.5, p, LEDGER)
    with pytest.raises(ValueError):
        solve_next_stage_index(3, 0.5, p, LEDGER)
    with pytest.raises(OverflowError):
        solve_next_stage_index(None, 1e-300, p, LEDGER, log_n_T=1e14, budget=1e14)


# ---------------------------------------------------------------------------
# auxiliary bound and lower-bound growth

def test_aux_bound_small():
    seq, rep = run_aux_bound(0.1, 1000, FLAT, 50_000)
    assert rep.dominated and rep.delta_bound_ok and rep.u_nondecreasing
    assert rep.identity_max_rel_err < 1e-12
    assert seq.u.shape == seq.Delta.shape == (50_000,)


def test_aux_bound_zero_gamma_is_trivial():
    _, rep = run_aux_bound(0.0, 100, FLAT, 2000)
    assert rep.dominated and rep.sup_a == 0.0 and rep.delta_bound_max_ratio == 0.0


def test_aux_bound_requires_integer_ones_and_capacity():
    with pytest.raises(ValueError):
        run_aux_bound(0.333, 100, FLAT, 1000)
    with pytest.raises(TraceCapacityError):
        run_aux_bound(0.1, 100, FLAT, 1000, n_max=500)


def test_lower_bound_holds_with_wide_margin():
    rep = check_lower_bound_growth(0.5, 4096, (0.25, 1 / 8))
    assert rep.ok
    assert rep.fraction == pytest.approx(0.75, abs=1e-3)


def test_lower_bound_counterexample_below_four_delta():
    # window gamma k/(2 delta) = k: the gamma k ones and the first
    # (1 - 2 delta/gamma) k zeros cannot be lifted; fraction
    # gamma + 1 - 2 delta / gamma = 1/4
    rep = check_lower_bound_growth(0.25, 4096, (0.25, 1 / 8))
    assert rep.window == 4096
    assert rep.fraction == pytest.approx(0.25, abs=1e-9)
    assert not rep.ok


def test_lower_bound_hypothesis_checked():
    with pytest.raises(ValueError):
        check_lower_bound_growth(0.1, 1000, (0.2, 0.1))
    with pytest.raises(ValueError):
        check_lower_bound_growth(0.25, 1000, (0.7, 0.1))


# ---------------------------------------------------------------------------
# stage maps and series

def test_divergence_map_matches_loop():
    p = EnvelopeParams(1, 1, 1, 1)
    Ls, terms, prods = divergence_stage_map(p, LEDGER, math.log(1e4), 50)
    L, prod = math.log(1e4), 1.0
    for t in range(50):
        term = L ** -1 * math.sqrt(L ** -1)
        prod *= 1 - 8 * term
        assert Ls[t] == pytest.approx(L, rel=1e-14)
        assert terms[t] == pytest.approx(term, rel=1e-14)
        assert prods[t] == pytest.approx(prod, rel=1e-13)
        L = L - math.log(2) + 0.5 * math.log(L)


def test_convergence_map_contracts():
    p = EnvelopeParams(1, 0.3, 1, 0.5)
    Ls, terms, gaps = convergence_stage_map(p, LEDGER, 10.0, 200)
    assert np.all(np.diff(Ls) > 0)
    assert np.all(np.diff(gaps) < 0)
    assert np.allclose(gaps[1:], gaps[:-1] * (1 - LEDGER.c_small * terms[1:]), rtol=1e-13)


def test_series_regimes():
    div = series_dichotomy(EnvelopeParams(0.5, 0, 1000, 2), LEDGER, T_max=10**4, T0=100)
    assert div.regime == "divergent-series" and div.monotone
    assert div.tail_bound is None and not div.cauchy_ok
    conv = series_dichotomy(EnvelopeParams(1, 1, 1, 1), LEDGER, T_max=10**4, T0=100)
    assert conv.regime == "convergent-series"
    assert conv.cauchy_ok and conv.tail_observed <= conv.tail_bound
    assert conv.increments_nondecreasing
    d = json.loads(conv.to_json())
    assert d["exponent"] == 1.5 and set(d["checkpoints"]) == {"1000", "10000"}
    text = conv.to_csv(header_lines=["x"], stride=1000)
    assert text.splitlines()[0] == "# x"


def test_series_default_start_advances():
    rep = series_dichotomy(EnvelopeParams(1, 1, 1, 1), LEDGER, T_max=100, T0=10)
    assert rep.log_n0 > 4.0
    with pytest.raises(ValueError):
        series_dichotomy(EnvelopeParams(1, 1, 1, 1), LEDGER, n_0=20, T_max=100, T0=10)


# ---------------------------------------------------------------------------
# constructions

def test_divergence_construction_small():
    p = EnvelopeParams(1, 1, 1, 1)
    rec, tr = construct_divergence(p, LEDGER, 2000, 6, n_max=10**5)
    assert rec.invariants_hold and rec.oscillation_witnessed
    assert rec.max_validity_violation <= 1e-12
    assert tr.n == rec.n[-1]
    assert rec.completed_stages == 7
    d = rec.to_dict()
    assert d["completed_stages"] == 7 and len(d["n_T"]) == 7


def test_divergence_without_erosion():
    p = EnvelopeParams(1, 1, 1, 1)
    rec, _ = construct_divergence(p, ConstantsLedger(C_big=0.0), 2000, 5, n_max=10**5)
    assert rec.erosion_product == 1.0
    assert np.all(rec.U == 1.0) and np.all(rec.B == 0.0)
    assert rec.U_inf == 1.0 and rec.B_inf == 0.0


def test_divergence_truncates_at_cap():
    p = EnvelopeParams(1, 1, 1, 1)
    rec, _ = construct_divergence(p, LEDGER, 2000, 100, n_max=20_000)
    assert rec.truncated and rec.n[-1] <= 20_000


def test_divergence_rejects_wrong_regime():
    with pytest.raises(ValueError):
        construct_divergence(EnvelopeParams(1, 0.3, 1, 0.5), LEDGER, 1000, 5)


def test_convergence_schedule_small():
    p = EnvelopeParams(1, 0.3, 1, 0.5)
    sched = certify_convergence_schedule(p, LEDGER, 20, n_max=10**5)
    assert sched.nested
    assert sched.contraction_ok()
    assert sched.contained is not False
    recs = list(sched.records())
    assert recs[0]["T"] == 0 and len(recs) == sched.T.size
    text = sched.to_csv(header_lines=["h"])
    assert text.splitlines()[1] == "T,log_n_T,B_T,U_T,gap,term_T,partial_sum"
