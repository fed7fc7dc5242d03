"""Acceptance gate.

Each criterion runs at its stated scale and tolerance and records one
``ACn PASS|FAIL`` line (shown in the pytest terminal summary, or printed when
this file is run as a script).  Wall time counts toward the verdict.
"""

from __future__ import annotations

import bisect
import math
import time

import numpy as np
import pytest
from scipy import special

from lookback import (
    ConstantsLedger,
    EnvelopeParams,
    OrderStatAccumulator,
    check_dominance_propagation,
    check_lower_bound_growth,
    check_reverse_majorization,
    construct_divergence,
    divergence_stage_map,
    majorizes,
    reconstruct_weights,
    run_aux_bound,
    run_schedule,
    series_dichotomy,
    step_interval,
)
from lookback.engine import ProcessTrace
from lookback.renewal import (
    ShapeDensity,
    l1_discretization_error,
    log_moment_report,
    overshoot_law,
    probe_function,
    renewal_identity_check,
    run_fixed_shape,
    simulate_overshoot,
    strong_discretization_check,
    verify_limit_formula,
)

pytestmark = pytest.mark.slow


def _random_envelope(rng, k_max, block_from=None):
    """Envelope with amplitudes in [0.1, 0.5] and exponents in [0, 1], valid
    from ``k_max`` on (and with ``delta_n n >= 1`` from ``block_from``)."""
    while True:
        p = EnvelopeParams(rng.uniform(0.1, 0.5), rng.uniform(0, 1),
                           rng.uniform(0.1, 0.5), rng.uniform(0, 1))
        if p.n_min > k_max:
            continue
        if block_from is not None and p.delta(block_from) * block_from < 1:
            continue
        return p


# ---------------------------------------------------------------------------
# criteria: each returns (passed, detail)

def ac1(instances=500, checks=20, seed=1):
    rng = np.random.default_rng(seed)
    worst_sum = worst_val = 0.0
    worst_out = 0
    checked = 0
    for _ in range(instances):
        params = _random_envelope(rng, 10, block_from=10)
        k = int(rng.integers(10, 101))
        n_end = int(rng.integers(k + 1, 2001))
        tr = ProcessTrace(rng.random(k), n_max=n_end)
        stops = np.unique(np.concatenate([rng.integers(k, n_end, size=checks), [n_end - 1]]))
        for n in stops:
            if n > tr.n:
                ns = np.arange(tr.n, n, dtype=np.float64)
                run_schedule(tr, params.eps_array(ns), params.delta_array(ns),
                             rng.random(ns.size))
            eps, delta = params.eps(n), params.delta(n)
            f, c = eps, eps + (1 - eps) / delta
            lam = float(rng.random())
            p = reconstruct_weights(tr, eps, delta, lam, f, c)
            a = tr.values.copy()
            v = step_interval(tr, eps, delta, lam)
            worst_sum = max(worst_sum, abs(math.fsum(p) - 1))
            worst_val = max(worst_val, abs(math.fsum((p * a).tolist()) - v))
            outside = np.count_nonzero((p < f / n * (1 - 1e-12)) | (p > c / n * (1 + 1e-12)))
            worst_out = max(worst_out, int(outside))
            checked += 1
    ok = worst_sum <= 1e-12 and worst_val <= 1e-10 and worst_out <= 1
    return ok, (f"{checked} weight vectors: |sum-1|<={worst_sum:.1e}, "
                f"|p.a-step|<={worst_val:.1e}, indices outside envelope<={worst_out}")


def ac2(ops=10**5, seed=2, probe=2000):
    rng = np.random.default_rng(seed)
    acc = OrderStatAccumulator(seed=seed)
    ref = []
    worst = 0.0
    kinds = rng.random(ops)
    for i in range(ops):
        n = len(ref)
        if n < 2 or kinds[i] < 0.5:
            # 20% small integers to exercise ties
            x = float(rng.random()) if rng.random() < 0.8 else float(rng.integers(0, 5))
            acc.insert(x)
            bisect.insort(ref, x)
            continue
        j = int(min(n, max(1, math.floor(math.exp(rng.uniform(0, math.log(n + 1)))))))
        q = kinds[i]
        if q < 0.7:
            got, want = acc.sum_top(j), math.fsum(ref[n - j:])
        elif q < 0.9:
            got, want = acc.sum_bottom(j), math.fsum(ref[:j])
        else:
            got, want = acc.kth_largest(j), ref[n - j]
        worst = max(worst, abs(got - want) / max(1.0, abs(want)))
    exps = np.arange(10, 21)
    per_op = []
    for e in exps:
        a = OrderStatAccumulator(seed=seed)
        a.extend(rng.random(2 ** int(e)))
        c = 0
        for x in rng.random(probe):
            a.insert(float(x))
            c += a.last_comparisons
            a.sum_top(int(rng.integers(1, a.count + 1)))
            c += a.last_comparisons
        per_op.append(c / (2 * probe))
    per_op = np.array(per_op)
    slope, icpt = np.polyfit(exps, per_op, 1)
    resid = per_op - (slope * exps + icpt)
    r2 = 1 - resid.var() / per_op.var()
    ratio = per_op / exps
    log_ok = r2 >= 0.9 and slope > 0 and ratio.max() / ratio.min() <= 1.5
    ok = worst <= 1e-12 and log_ok
    return ok, (f"{ops} ops, max rel err {worst:.1e}; comparisons/op "
                f"{per_op[0]:.1f}..{per_op[-1]:.1f} over 2^10..2^20, "
                f"linear in log2 n (R^2={r2:.3f}, per-log2 spread {ratio.max() / ratio.min():.2f})")


def _majorizing_pair(rng, k):
    b = rng.random(k)
    a = np.sort(b)[::-1].copy()
    # moving mass from a lower-ranked to a higher-ranked entry raises prefixes
    for _ in range(int(rng.integers(0, k))):
        i, j = sorted(rng.integers(0, k, size=2))
        t = rng.uniform(0, 0.5) * a[j]
        a[i] += t
        a[j] -= t
    if rng.random() < 0.5:
        a += rng.uniform(0, 0.1, size=k)
    return rng.permutation(a), b


def ac3(instances=200, horizon=5000, seed=4):
    rng = np.random.default_rng(seed)
    bad = 0
    worst = -math.inf
    for _ in range(instances):
        k = int(rng.integers(20, 200))
        params = _random_envelope(rng, k)
        a, b = _majorizing_pair(rng, k)
        assert majorizes(a, b)
        r = check_dominance_propagation(a, b, params, horizon,
                                        seed=int(rng.integers(2**32)), tol=1e-12)
        bad += not r.ok
        worst = max(worst, r.max_prefix_deficit)
    return bad == 0, (f"{instances} pairs to n={horizon}: {bad} violating; "
                      f"max prefix deficit {worst:.1e}")


def ac4(instances=100, horizon=5000, seed=5):
    rng = np.random.default_rng(seed)
    bad = 0
    worst = 0.0
    spans = []
    for _ in range(instances):
        k = int(rng.integers(50, 500))
        params = _random_envelope(rng, k)
        m = max(1, math.floor(params.delta(k) * k))
        top = rng.uniform(9.9, 10.0, size=m)
        a = rng.permutation(np.concatenate([rng.random(k - m), top]))
        r = check_reverse_majorization(a, m, params, horizon, tol=1e-10)
        bad += not r.ok
        worst = max(worst, r.max_abs_diff)
        spans.append(r.checked_until - k)
    spans = np.array(spans)
    ok = bad == 0 and spans.min() > 0
    return ok, (f"{instances} instances: {bad} mismatching, max diff {worst:.1e}, "
                f"guarded span min {spans.min()} / median {int(np.median(spans))} steps")


def ac5():
    params = EnvelopeParams(0.5, 0.0, 0.5, 0.0)
    parts = []
    ok = True
    for g in (0.3, 0.1, 0.01):
        _, r = run_aux_bound(g, 10**4, params, 10**6)
        ok &= r.dominated and r.identity_max_rel_err <= 1e-10 and r.delta_bound_ok
        parts.append(f"g={g}: dom={r.dominated} id={r.identity_max_rel_err:.1e} "
                     f"D/bound={r.delta_bound_max_ratio:.15f}")
    return ok, "; ".join(parts)


def ac6(settings=20, k=4096, seed=6):
    rng = np.random.default_rng(seed)
    fails = []
    for _ in range(settings):
        delta = rng.uniform(1 / 64, 1 / 4)
        gamma = int(rng.integers(math.ceil(2 * delta * k), k // 2 + 1)) / k
        eps = rng.uniform(0.01, 0.5)
        r = check_lower_bound_growth(gamma, k, (eps, delta))
        if not r.ok:
            fails.append(f"g/d={gamma / delta:.2f}:{r.fraction:.3f}")
    return not fails, (f"{settings - len(fails)}/{settings} settings reach half; "
                       f"failing (gamma/delta:fraction) {', '.join(fails[:6])}"
                       + (" ..." if len(fails) > 6 else ""))


def ac7():
    P = EnvelopeParams(1, 1, 1, 1)
    ledger = ConstantsLedger()
    k = 10**4
    rec, _ = construct_divergence(P, ledger, k, 100, n_max=10**6)
    stages = rec.completed_stages - 1
    # independent recomputation of the partial erosion product
    L = math.log(k)
    prod = 1.0
    for _ in range(stages):
        e = P.A * L ** -P.alpha
        d = P.B * L ** -P.beta
        prod *= 1 - ledger.C_big * e * math.sqrt(d)
        L = L - math.log(2) - 0.5 * math.log(d)
    _, _, prods = divergence_stage_map(P, ledger, math.log(k), stages)
    d1 = abs(rec.erosion_product - prods[-1])
    d2 = abs(rec.erosion_product - prod)
    ok = (rec.invariants_hold and rec.oscillation_witnessed and stages >= 1
          and d1 <= 1e-6 and d2 <= 1e-6)
    return ok, (f"{stages} stages to n={rec.n[-1]}: invariants={rec.invariants_hold}, "
                f"oscillation={rec.oscillation_witnessed}, erosion {rec.erosion_product:.9f} "
                f"(map diff {d1:.1e}, direct diff {d2:.1e})")


def ac8():
    ledger = ConstantsLedger()
    # amplitudes are free; the tail scales as A sqrt(B)
    r1 = series_dichotomy(EnvelopeParams(1 / 16, 1, 1, 1), ledger, T_max=10**6, T0=10**3)
    r2 = series_dichotomy(EnvelopeParams(0.5, 0, 1000, 2), ledger, T_max=10**6, T0=10**3)
    cp = r2.checkpoints
    grow = cp[10**6] - cp[10**3]
    ok1 = (r1.regime == "convergent-series" and r1.cauchy_ok and r1.tail_bound < 1e-3
           and abs(r1.fitted_exponent - 1.5) <= 0.05)
    ok2 = (r2.regime == "divergent-series" and r2.monotone and grow >= 1
           and abs(r2.fitted_exponent - 1.0) <= 0.05)
    return ok1 and ok2, (
        f"(1,1): tail bound {r1.tail_bound:.2e} observed {r1.tail_observed:.2e} "
        f"exponent {r1.fitted_exponent:.4f}; (0,2): S(1e6)-S(1e3)={grow:.3f} "
        f"exponent {r2.fitted_exponent:.4f}")


def ac9():
    uni = ShapeDensity.uniform()
    smp = simulate_overshoot(uni, 30.0, 10**6, seed=9)
    law = overshoot_law(uni)
    ks = smp.ks(law)
    norm_u = law.normalization()
    beta = ShapeDensity.beta(2, 2)
    norm_b = overshoot_law(beta).normalization()
    mu_closed = float(special.digamma(4) - special.digamma(2))
    mu_quad = log_moment_report(beta).mu
    err_n = max(abs(v - 1) for v in (*norm_u, *norm_b))
    err_mu = max(abs(mu_closed - 5 / 6), abs(mu_quad - 5 / 6))
    ok = ks < 0.01 and err_n <= 1e-6 and err_mu <= 1e-6
    return ok, (f"KS={ks:.2e}; normalization err {err_n:.1e}; "
                f"mu digamma {mu_closed:.12f} quad {mu_quad:.12f}")


def ac10(samples=10**5):
    shapes = (ShapeDensity.uniform(), ShapeDensity.beta(2, 2))
    names = ("constant", "exponential", "smoothed_step")
    worst = 0.0
    bad = []
    for sh in shapes:
        for name in names:
            rep = renewal_identity_check(probe_function(name), sh, [1, 5, 10], samples, seed=10)
            for row in rep.rows:
                worst = max(worst, abs(row["G"] - row["rhs"]) / row["tol"])
                if not row["ok"]:
                    bad.append(f"{sh.name}/{name}@{row['s']}")
    return not bad, (f"18 grid points, worst |G-rhs|/tolerance {worst:.2f}"
                     + (f"; failing {bad}" if bad else ""))


def ac11():
    uni = run_fixed_shape(ShapeDensity.uniform(), [0.0, 1.0], 10**6)
    v = uni.trace.values
    exact = bool(np.all(v[2:] == 0.5)) and uni.limit == 0.5
    beta = run_fixed_shape(ShapeDensity.beta(2, 2), [0.0, 1.0], 10**6)
    rep = verify_limit_formula(beta, stab_tol=1e-4)
    ok = exact and beta.stabilization < 1e-4 and abs(rep.difference) <= 1e-3
    return ok, (f"uniform terms all 0.5: {exact}; Beta(2,2) limit {beta.limit:.10f}, "
                f"spread {beta.stabilization:.1e}, formula {rep.rhs:.10f} "
                f"(diff {rep.difference:.1e})")


def ac12():
    uni = ShapeDensity.uniform()
    xs = np.geomspace(10.5, 9999.5, 40)
    xs = xs[xs != np.floor(xs)]
    got = np.array([l1_discretization_error(uni, x) for x in xs])
    claimed = xs / np.floor(xs) - 1
    derived = 2 * (1 - np.floor(xs) / xs)
    d_claim = float(np.max(np.abs(got - claimed)))
    d_derived = float(np.max(np.abs(got - derived)))
    fit = strong_discretization_check(ShapeDensity.beta(2, 2), np.geomspace(10, 1e4, 25))
    ok = d_claim <= 1e-10 and fit.kappa >= 0.95
    return ok, (f"uniform: max |L1 - (x/floor(x)-1)| = {d_claim:.2e} "
                f"(vs 2(1-floor(x)/x): {d_derived:.1e}); Beta(2,2) kappa={fit.kappa:.4f}")


CRITERIA = {
    "AC1": (ac1, 10), "AC2": (ac2, 30), "AC3": (ac3, 60), "AC4": (ac4, 60),
    "AC5": (ac5, 120), "AC6": (ac6, 120), "AC7": (ac7, 300), "AC8": (ac8, 60),
    "AC9": (ac9, 60), "AC10": (ac10, 120), "AC11": (ac11, 600), "AC12": (ac12, 60),
}


def evaluate(key):
    fn, limit = CRITERIA[key]
    t0 = time.perf_counter()
    ok, detail = fn()
    dt = time.perf_counter() - t0
    ok = bool(ok) and dt < limit
    line = f"{key:<4} {'PASS' if ok else 'FAIL'}  [{dt:6.1f}s < {limit}s] {detail}"
    return ok, line


@pytest.mark.parametrize("key", list(CRITERIA))
def test_criterion(key, acceptance_log):
    ok, line = evaluate(key)
    acceptance_log[key] = line
    print(line)
    assert ok, line


if __name__ == "__main__":
    import sys

    failed = 0
    for key in CRITERIA:
        ok, line = evaluate(key)
        failed += not ok
        print(line, flush=True)
    sys.exit(1 if failed else 0)
