"""Stage-level bound checks and interval constructions.

Four groups of tools live here:

* the auxiliary upper-bound sequence ``u_n`` that dominates the max rule
  started from a block of ones (:func:`run_aux_bound`) and the matching
  lower-bound count (:func:`check_lower_bound_growth`);
* the nested shrinking-interval schedule that certifies convergence when
  ``alpha + beta/2 <= 1`` (:func:`certify_convergence_schedule`);
* the back-and-forth construction that prevents convergence when
  ``alpha + beta/2 > 1`` (:func:`construct_divergence`);
* the two stage maps iterated in log-space, where the dichotomy shows up as
  a divergent or convergent series of ``eps_{n_T} delta_{n_T}^{1/2}``
  (:func:`series_dichotomy`).

Stage indices grow super-exponentially, so every stage map works with
``L = log n`` and only converts to integers while a direct simulation is
feasible.
"""

from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numba import njit

from .engine import InvariantViolation, ProcessTrace, TraceCapacityError, run_schedule
from .envelope import SCHEDULE_CAP, ConstantsLedger, EnvelopeParams

__all__ = [
    "AuxSequence",
    "DivergenceRecord",
    "LowerBoundReport",
    "NextStage",
    "SeriesReport",
    "StageSchedule",
    "certify_convergence_schedule",
    "check_lower_bound_growth",
    "construct_divergence",
    "convergence_stage_map",
    "divergence_stage_map",
    "run_aux_bound",
    "series_dichotomy",
    "solve_next_stage_index",
]

LOG_BUDGET = 1e15


# ---------------------------------------------------------------------------
# auxiliary upper-bound sequence

@njit(cache=True)
def _aux_kernel(k, horizon, gk, eps, delta):
    """u_1..u_horizon and Delta_n = n u_n - sum_{j<=n} u_j (Neumaier sums)."""
    u = np.zeros(horizon)
    D = np.zeros(horizon)
    s = 0.0
    comp = 0.0
    for n in range(k, horizon):
        i = n - k
        ubar = (s + comp) / n
        x = eps[i] * ubar + (1.0 - eps[i]) * u[n - 1] + gk / (delta[i] * n)
        u[n] = x
        t = s + x
        if abs(s) >= abs(x):
            comp += (s - t) + x
        else:
            comp += (x - t) + s
        s = t
        D[n] = (n + 1) * x - (s + comp)
    return u, D


@dataclass
class AuxSequence:
    """Auxiliary bound sequence and its bookkeeping.

    Attributes
    ----------
    u : numpy.ndarray
        ``u_1..u_N`` (zero on the first ``k`` entries).
    Delta : numpy.ndarray
        ``Delta_n = n (u_n - mean(u_1..u_n))``.
    gamma : float
        Fraction of ones in the initialization.
    k : int
    """

    u: np.ndarray
    Delta: np.ndarray
    gamma: float
    k: int


@dataclass
class AuxBoundReport:
    """Checks of the auxiliary bound; ``C_empirical`` is the smallest ``C``
    with ``sup_{n>k} a_n <= C gamma / (eps_k delta_k)``."""

    gamma: float
    k: int
    horizon: int
    dominated: bool
    first_domination_failure: Optional[int]
    identity_max_rel_err: float
    delta_bound_ok: bool
    delta_bound_max_ratio: float
    u_nondecreasing: bool
    sup_a: float
    C_empirical: float
    C_from_u: float

    @property
    def ok(self):
        return (self.dominated and self.delta_bound_ok and self.u_nondecreasing
                and self.identity_max_rel_err <= 1e-10)

    def to_dict(self):
        d = asdict(self)
        d["ok"] = self.ok
        return d


def _gamma_ones(gamma, k):
    g = gamma * k
    ones = int(round(g))
    if abs(ones - g) > 1e-9 * max(1.0, g):
        raise ValueError(f"gamma*k={g!r} must be an integer")
    return ones


def run_aux_bound(gamma, k, params, horizon, n_max=None, tol=1e-12):
    """Simulate the max rule from ``gamma k`` ones and the auxiliary sequence.

    The auxiliary sequence starts with ``u_1 = ... = u_k = 0`` and follows

        u_{n+1} = eps_n mean(u_1..u_n) + (1 - eps_n) u_n + gamma k / (delta_n n).

    Returns
    -------
    AuxSequence, AuxBoundReport

    Raises
    ------
    TraceCapacityError
        If ``horizon`` exceeds ``n_max``.
    """
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma={gamma!r} outside [0, 1]")
    if k < params.n_min:
        raise ValueError(f"k={k} precedes the first valid index {params.n_min}")
    n_max = horizon if n_max is None else n_max
    if horizon > n_max:
        raise TraceCapacityError(f"horizon {horizon} exceeds n_max={n_max}")
    ones = _gamma_ones(gamma, k)
    init = np.zeros(k)
    init[:ones] = 1.0
    ns = np.arange(k, horizon, dtype=np.float64)
    eps = params.eps_array(ns)
    delta = params.delta_array(ns)
    tr = ProcessTrace(init, n_max=horizon)
    run_schedule(tr, eps, delta, 1.0)
    a = tr.values
    gk = float(ones)
    u, D = _aux_kernel(k, horizon, gk, eps, delta)

    # Delta_{n+1} = (1 - eps_n) Delta_n + gamma k / delta_n, n = k..horizon-1
    if horizon > k + 1:
        lhs = D[k:]
        prev = np.concatenate(([0.0], D[k:-1]))
        rhs = (1.0 - eps) * prev + gk / delta
        rel = np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-300)
        ident = float(rel.max()) if gk > 0 else float(np.abs(lhs - rhs).max())
        # Delta_n <= gamma k / (eps_n delta_n) for n >= k
        bound = gk / (eps * delta)
        Dn = np.concatenate(([0.0], D[k:-1]))
        dmax = float((Dn / bound).max()) if gk > 0 else 0.0
        d_ok = bool(np.all(Dn <= bound * (1 + tol)))
    else:
        ident, dmax, d_ok = 0.0, 0.0, True
    tail_a = a[k:]
    tail_u = u[k:]
    bad = np.nonzero(tail_a > tail_u + tol * np.maximum(1.0, np.abs(tail_u)))[0]
    nondec = bool(np.all(np.diff(u[k - 1:]) >= -tol * np.maximum(1.0, np.abs(u[k:]))))
    ek, dk = params.eps(k), params.delta(k)
    sup_a = float(tail_a.max()) if tail_a.size else 0.0
    scale = ek * dk / gamma if gamma > 0 else 0.0
    report = AuxBoundReport(
        gamma=gamma, k=k, horizon=horizon,
        dominated=bad.size == 0,
        first_domination_failure=int(k + bad[0] + 1) if bad.size else None,
        identity_max_rel_err=ident,
        delta_bound_ok=d_ok,
        delta_bound_max_ratio=dmax,
        u_nondecreasing=nondec,
        sup_a=sup_a,
        C_empirical=sup_a * scale,
        C_from_u=float(tail_u.max()) * scale if tail_u.size else 0.0,
    )
    return AuxSequence(u=u, Delta=D, gamma=gamma, k=k), report


# ---------------------------------------------------------------------------
# lower-bound growth

@dataclass
class LowerBoundReport:
    """Count of early terms above ``1 - eps (5 delta/gamma)^(1-eps)``.

    ``eps_empirical`` is the smallest coefficient ``e`` for which at least
    half of the counted terms satisfy ``a_n >= 1 - e (5 delta/gamma)^(1-eps)``.
    """

    gamma: float
    k: int
    eps: float
    delta: float
    window: int
    threshold: float
    count: int
    fraction: float
    eps_empirical: float

    @property
    def ok(self):
        return self.fraction >= 0.5

    def to_dict(self):
        d = asdict(self)
        d["ok"] = self.ok
        return d


def check_lower_bound_growth(gamma, k, params, horizon=None, tol=1e-12):
    """Run the max rule with frozen ``(eps, delta)`` from ``gamma k`` ones
    followed by zeros, and count terms meeting the closed-form threshold
    among the first ``floor(gamma k / (2 delta))``.

    Parameters
    ----------
    gamma : float
        Fraction of ones, in ``(0, 1/2]`` with ``gamma >= 2 delta``.
    k : int
        Initialization length (``gamma k`` must be an integer).
    params : EnvelopeParams or tuple
        Either ``(eps, delta)`` or envelope parameters frozen at ``k``.
    horizon : int, optional
        Overrides the counting window.

    Raises
    ------
    ValueError
        If ``gamma < 2 delta`` or any constant lies outside ``(0, 1/2]``.
    """
    if isinstance(params, EnvelopeParams):
        eps, delta = params.eps(k), params.delta(k)
    else:
        eps, delta = (float(v) for v in params)
    for name, v in (("gamma", gamma), ("eps", eps), ("delta", delta)):
        if not 0 < v <= SCHEDULE_CAP:
            raise ValueError(f"{name}={v!r} outside (0, 1/2]")
    if gamma < 2 * delta * (1 - 1e-12):
        raise ValueError(f"hypothesis gamma >= 2 delta fails ({gamma} < {2 * delta})")
    ones = _gamma_ones(gamma, k)
    window = int(math.floor(ones / (2 * delta) + 1e-9))
    if horizon is not None:
        window = int(horizon)
    n_end = max(window, k)
    init = np.zeros(k)
    init[:ones] = 1.0
    tr = ProcessTrace(init, n_max=n_end)
    steps = n_end - k
    if steps:
        run_schedule(tr, np.full(steps, eps), delta, 1.0)
    a = tr.values[:window]
    factor = (5 * delta / gamma) ** (1 - eps)
    thr = 1 - eps * factor
    cnt = int(np.count_nonzero(a >= thr - tol))
    half = (window + 1) // 2
    median_hi = np.sort(a)[::-1][half - 1] if window else 1.0
    return LowerBoundReport(
        gamma=gamma, k=k, eps=eps, delta=delta, window=window, threshold=thr,
        count=cnt, fraction=cnt / window if window else 1.0,
        eps_empirical=float((1 - median_hi) / factor),
    )


# ---------------------------------------------------------------------------
# stage maps in log-space

@njit(cache=True)
def _stage_g(L, logA, alpha, logB, beta):
    # log(n eps_n^2 delta_n^3) with L = log n
    return L + 2.0 * logA - 2.0 * alpha * math.log(L) + 3.0 * logB - 3.0 * beta * math.log(L)


@njit(cache=True)
def _solve_L(L_T, target, logA, alpha, logB, beta):
    """Smallest L >= L_T on the increasing branch with g(L) >= target."""
    lo = max(L_T, 2.0 * alpha + 3.0 * beta)
    if _stage_g(lo, logA, alpha, logB, beta) >= target:
        return lo
    hi = max(2.0 * lo, target - 2.0 * logA - 3.0 * logB + 1.0)
    while _stage_g(hi, logA, alpha, logB, beta) < target:
        lo = hi
        hi *= 2.0
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if _stage_g(mid, logA, alpha, logB, beta) >= target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 4e-16 * hi:
            break
    return hi


@njit(cache=True)
def _conv_map(logA, alpha, logB, beta, logK, c, L0, gap0, T):
    """Convergence stage map; returns (L_T, term_T, gap_T) for T = 0..T-1.

    ``term_T = eps delta^{1/2}`` at ``n_T`` and ``gap_{T+1} = gap_T (1 - c term_{T+1})``.
    """
    Ls = np.empty(T)
    terms = np.empty(T)
    gaps = np.empty(T)
    A_sqrtB = math.exp(logA + 0.5 * logB)
    p = alpha + 0.5 * beta
    L = L0
    gap = gap0
    for t in range(T):
        Ls[t] = L
        terms[t] = A_sqrtB * L ** (-p)
        gaps[t] = gap
        if gap <= 0.0:
            for s in range(t + 1, T):
                Ls[s] = L
                terms[s] = terms[t]
                gaps[s] = gap
            break
        target = L + 2.0 * logK - 2.0 * math.log(gap)
        L = _solve_L(L, target, logA, alpha, logB, beta)
        gap *= 1.0 - c * A_sqrtB * L ** (-p)
    return Ls, terms, gaps


@njit(cache=True)
def _div_map(logA, alpha, logB, beta, C, L0, T):
    """Divergence stage map; returns (L_T, term_T, erosion partial products).

    ``L_{T+1} = L_T - log 2 - (1/2) log delta_{n_T}`` and the product after
    stage T is ``prod_{t<=T} (1 - C term_t)``.
    """
    Ls = np.empty(T)
    terms = np.empty(T)
    prods = np.empty(T)
    A_sqrtB = math.exp(logA + 0.5 * logB)
    p = alpha + 0.5 * beta
    L = L0
    prod = 1.0
    for t in range(T):
        Ls[t] = L
        term = A_sqrtB * L ** (-p)
        terms[t] = term
        prod *= 1.0 - C * term
        prods[t] = prod
        L = L - math.log(2.0) - 0.5 * (logB - beta * math.log(L))
    return Ls, terms, prods


def convergence_stage_map(params, ledger, L0, T, gap0=1.0):
    """Iterate the implicit convergence schedule for ``T`` stages from
    ``log n_0 = L0``; returns arrays ``(L, term, gap)``."""
    return _conv_map(math.log(params.A), params.alpha, math.log(params.B), params.beta,
                     math.log(ledger.K), ledger.c_small, float(L0), float(gap0), int(T))


def divergence_stage_map(params, ledger, L0, T):
    """Iterate ``n_{T+1} = n_T / (2 delta_{n_T}^{1/2})`` for ``T`` stages;
    returns arrays ``(L, term, erosion_product)``."""
    return _div_map(math.log(params.A), params.alpha, math.log(params.B), params.beta,
                    ledger.C_big, float(L0), int(T))


@dataclass(frozen=True)
class NextStage:
    """Solution of the implicit stage equation.

    ``log_n`` is the real root in log-space; ``n`` the smallest integer
    satisfying the inequality when it is representable (else ``None``);
    ``residual`` is ``log(m eps_m^2 delta_m^3) - log(n_T K^2 / gap^2)`` at
    the returned point (non-negative).
    """

    log_n: float
    n: Optional[int]
    residual: float


def solve_next_stage_index(n_T, gap, params, ledger, log_n_T=None, budget=LOG_BUDGET):
    """Smallest ``m >= n_T`` with ``m eps_m^2 delta_m^3 >= n_T K^2 / gap^2``.

    Parameters
    ----------
    n_T : int or None
        Current stage index (may be ``None`` when ``log_n_T`` is given).
    gap : float
        Current interval length in ``(0, 1]``.
    log_n_T : float, optional
        ``log n_T`` for indices beyond integer range.
    budget : float
        Largest admissible ``log m``.

    Raises
    ------
    ValueError
        On a gap outside ``(0, 1]`` or ``n_T < n_min``.
    OverflowError
        If the root exceeds the log budget.
    """
    if not 0 < gap <= 1:
        raise ValueError(f"gap={gap!r} outside (0, 1]")
    if log_n_T is None:
        if n_T < params.n_min:
            raise ValueError(f"n_T={n_T} precedes the first valid index {params.n_min}")
        log_n_T = math.log(n_T)
    logA, logB = math.log(params.A), math.log(params.B)
    target = log_n_T + 2 * math.log(ledger.K) - 2 * math.log(gap)
    L = _solve_L(log_n_T, target, logA, params.alpha, logB, params.beta)
    if not math.isfinite(L) or L > budget:
        raise OverflowError(f"log n_(T+1)={L!r} exceeds the budget {budget}")

    def g(x):
        return _stage_g(x, logA, params.alpha, logB, params.beta) - target

    if n_T is not None and L < 36:
        # below 2^52 the product is formed directly so exact ties resolve exactly
        rhs = n_T * ledger.K ** 2 / gap ** 2

        def ok(m):
            return m * params.eps(m) ** 2 * params.delta(m) ** 3 >= rhs
    else:
        def ok(m):
            return g(math.log(m)) >= 0

    n_int = None
    res = g(L)
    if L < 700:
        m = max(math.ceil(math.exp(L)), math.ceil(math.exp(log_n_T) - 1e-9))
        while m > 1 and math.log(m - 1) >= log_n_T and ok(m - 1):
            m -= 1
        while not ok(m):
            m += 1
        n_int = int(m)
        res = g(math.log(m))
    return NextStage(log_n=float(L), n=n_int, residual=float(res))


# ---------------------------------------------------------------------------
# convergence schedule

CASE_NAMES = {0: "init", 1: "upper", 2: "lower", 3: "interior", 4: "log-space", 5: "terminal"}


@dataclass
class StageSchedule:
    """Per-stage record of the nested-interval schedule.

    Columns are numpy arrays indexed by stage ``T``.  ``B`` and ``U`` are
    NaN for stages advanced in log-space (only the gap is tracked there).
    ``case`` codes: 1 contract the upper endpoint after a low-mean crossing,
    2 contract the lower endpoint after a high-mean crossing, 3 no crossing
    (half-step contraction), 4 log-space stage.
    """

    params: EnvelopeParams
    ledger: ConstantsLedger
    T: np.ndarray
    log_n: np.ndarray
    B: np.ndarray
    U: np.ndarray
    gap: np.ndarray
    log_n_plus: np.ndarray
    term: np.ndarray
    contraction: np.ndarray
    case: np.ndarray
    tie: np.ndarray
    direct: np.ndarray
    spot_ok: np.ndarray
    c_empirical: np.ndarray
    contained: Optional[bool] = None
    simulated_until: int = 0
    regime_warning: Optional[str] = None
    terminated: bool = False

    @property
    def n(self):
        """Integer stage indices where representable (``-1`` otherwise)."""
        out = np.full(self.log_n.shape, -1, dtype=np.int64)
        ok = self.log_n < 43
        out[ok] = np.rint(np.exp(self.log_n[ok])).astype(np.int64)
        return out

    @property
    def partial_sums(self):
        return np.cumsum(self.term)

    @property
    def nested(self):
        """Direct stages have nested intervals and shrinking gaps."""
        d = self.direct
        B, U = self.B[d], self.U[d]
        ok = bool(np.all(np.diff(B) >= -1e-15) and np.all(np.diff(U) <= 1e-15))
        return ok and bool(np.all(np.diff(self.gap) <= 1e-15))

    def contraction_ok(self):
        """``gap_{T+1} <= gap_T (1 - c_small eps_* delta_*^{1/2})`` at every stage."""
        g = self.gap
        if g.size < 2:
            return True
        bound = g[:-1] * (1 - self.ledger.c_small * self.term[1:])
        return bool(np.all(g[1:] <= bound * (1 + 1e-12) + 1e-300))

    def records(self):
        for i in range(self.T.size):
            yield {
                "T": int(self.T[i]), "log_n_T": float(self.log_n[i]),
                "B_T": float(self.B[i]), "U_T": float(self.U[i]),
                "gap": float(self.gap[i]), "log_n_T_plus": float(self.log_n_plus[i]),
                "term": float(self.term[i]), "contraction": float(self.contraction[i]),
                "case": CASE_NAMES[int(self.case[i])], "tie": bool(self.tie[i]),
                "direct": bool(self.direct[i]),
            }

    def to_csv(self, path=None, header_lines=()):
        return _stage_csv(self.T, self.log_n, self.B, self.U, self.gap, self.term,
                          path, header_lines)


def _stage_csv(T, log_n, B, U, gap, term, path, header_lines):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    buf.write("T,log_n_T,B_T,U_T,gap,term_T,partial_sum\n")
    S = np.cumsum(term)
    for row in zip(T, log_n, B, U, gap, term, S):
        buf.write(f"{int(row[0])}," + ",".join(f"{float(v):.17g}" for v in row[1:]) + "\n")
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _lam_for_stage(spec, T, steps, rng):
    if spec == "alternating":
        return 1.0 if T % 2 == 0 else 0.0
    if spec == "max":
        return 1.0
    if spec == "min":
        return 0.0
    if spec == "random":
        return rng.random(steps)
    if callable(spec):
        return spec(T, steps)
    lam = float(spec)
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda={lam!r} outside [0, 1]")
    return lam


def certify_convergence_schedule(params, ledger, T_max, k=None, init=None,
                                 n_max=10**6, lam="alternating", seed=0,
                                 interval=(0.0, 1.0), tol=1e-12):
    """Build the nested-interval schedule, simulating while ``n_T <= n_max``.

    At stage ``T`` with interval ``[B, U]`` and gap ``g``:

    * ``n_{T+1}`` solves ``n eps_n^2 delta_n^3 = n_T K^2 / g^2`` and
      ``n_T^+ = n_T K / (eps_* delta_*^2 g)`` with ``eps_*, delta_*`` taken
      at ``n_{T+1}``;
    * the dynamics run to ``n_{T+1}`` with the chosen interval coefficient;
    * the first ``m`` in ``[n_T^+, n_{T+1}]`` whose running mean is within
      ``delta_m^{1/2}`` proximity of an endpoint contracts the opposite
      endpoint by ``c_small eps_* delta_*^{1/2} g``; when both fire at the
      same ``m`` the condition with the larger margin wins and the tie is
      recorded;
    * otherwise the endpoint on the far side of the final mean is pulled in
      by ``(1/2) eps_* delta_*^{1/2} g``.

    Once ``n_{T+1}`` exceeds ``n_max`` the remaining stages follow the
    log-space recurrence for the gap.

    Parameters
    ----------
    params : EnvelopeParams
    ledger : ConstantsLedger
    T_max : int
        Total number of stage transitions.
    k : int, optional
        Initialization length; defaults to the first index where the stage
        equation is monotone.
    init : array_like, optional
        Initial terms in ``[B_0, U_0]``; default seeded uniform draws.
    lam : {"alternating", "max", "min", "random"}, float or callable
        Interval coefficient per stage.  Default alternates max and min.
    interval : tuple
        ``(B_0, U_0)``.  A zero-length interval ends the schedule at once.

    Warns
    -----
    RuntimeWarning
        When ``alpha + beta/2 > 1`` (outside the convergent regime).
    """
    p = params.alpha + params.beta / 2
    regime_warning = None
    if p > 1:
        regime_warning = (f"alpha + beta/2 = {p} > 1: the contraction series converges "
                          "and the schedule need not certify convergence")
        warnings.warn(regime_warning, RuntimeWarning, stacklevel=2)
    floor = params.stage_floor(upto=float("inf"))
    if k is None:
        k = max(16, floor)
    if k < params.n_min:
        raise ValueError(f"k={k} precedes the first valid index {params.n_min}")
    B, U = (float(v) for v in interval)
    rng = np.random.default_rng(seed)
    direct = k <= n_max
    if direct:
        if init is None:
            init = B + (U - B) * rng.random(k)
        init = np.asarray(init, dtype=np.float64)
        if init.shape != (k,):
            raise ValueError(f"init must have length k={k}")
        if np.any(init < B - tol) or np.any(init > U + tol):
            raise ValueError("init must lie in the starting interval")

    cols = {name: [] for name in ("log_n", "B", "U", "gap", "log_n_plus", "term",
                                  "contraction", "case", "tie", "direct", "spot_ok",
                                  "c_emp")}

    def push(log_n, B_, U_, gap_, lp, term, contr, case, tie, direct, spot, c_emp):
        for name, v in zip(cols, (log_n, B_, U_, gap_, lp, term, contr, case, tie,
                                  direct, spot, c_emp)):
            cols[name].append(v)

    logA, logB = math.log(params.A), math.log(params.B)
    pexp = params.alpha + params.beta / 2

    def term_at(L):
        return math.exp(logA + 0.5 * logB) * L ** (-pexp)

    L_T = math.log(k)
    n_T = k
    push(L_T, B, U, U - B, np.nan, term_at(L_T), 1.0, 0, False, True, True, np.nan)
    terminated = False
    if U - B <= 0:
        terminated = True
        T_max = 0

    tr = ProcessTrace(init, n_max=n_max, seed=seed) if direct else None
    T = 0
    # (stage index into cols, n_T, B, U, contracted side, factor) for containment
    direct_stages = [(0, k, B, U)]
    c_emp_fix = []
    while T < T_max and direct:
        gap = U - B
        nxt = solve_next_stage_index(n_T, gap, params, ledger)
        if nxt.n is None or nxt.n > n_max:
            direct = False
            break
        n_next = nxt.n
        eps_s, delta_s = params.eps(n_next), params.delta(n_next)
        L_plus = L_T + math.log(ledger.K) - math.log(eps_s) - 2 * math.log(delta_s) - math.log(gap)
        n_plus = math.ceil(math.exp(L_plus))
        steps = n_next - tr.n
        if steps > 0:
            ns = np.arange(tr.n, n_next, dtype=np.float64)
            run_schedule(tr, params.eps_array(ns), params.delta_array(ns),
                         _lam_for_stage(lam, T, steps, rng))
        vals = tr.values
        ms = np.arange(max(n_plus, 1), n_next + 1)
        csum = np.cumsum(vals[: n_next])
        abar = csum[ms - 1] / ms
        sq = np.sqrt(params.delta_array(ms.astype(np.float64)))
        thr_low = sq * U + (1 - sq) * B
        thr_high = sq * B + (1 - sq) * U
        low = np.nonzero(abar <= thr_low)[0]
        high = np.nonzero(abar >= thr_high)[0]
        step = eps_s * math.sqrt(delta_s) * gap
        tie = False
        spot = True
        if low.size or high.size:
            il = low[0] if low.size else np.inf
            ih = high[0] if high.size else np.inf
            if il == ih:
                tie = True
                i = int(il)
                upper = (thr_low[i] - abar[i]) >= (abar[i] - thr_high[i])
            else:
                upper = il < ih
                i = int(min(il, ih))
            m_cross = int(ms[i])
            if upper:
                case, U_new, B_new = 1, U - ledger.c_small * step, B
                seg = vals[m_cross:n_next]
                spot = bool(np.all(seg <= U_new + tol))
            else:
                case, U_new, B_new = 2, U, B + ledger.c_small * step
                seg = vals[m_cross:n_next]
                spot = bool(np.all(seg >= B_new - tol))
        else:
            U_minus = U - 0.5 * step
            B_plus = B + 0.5 * step
            seg = vals[n_plus:n_next]
            spot = bool(np.all((seg <= U_minus + tol) & (seg >= B_plus - tol)))
            width = U_minus - B_plus
            gam = (abar[-1] - B_plus) / width if width > 0 else 0.5
            if gam <= 0.5:
                case, U_new, B_new = 3, U_minus, B
            else:
                case, U_new, B_new = 3, U, B_plus
        T += 1
        L_T, n_T = math.log(n_next), n_next
        B, U = B_new, U_new
        push(L_T, B, U, U - B, L_plus, term_at(L_T), (U - B) / gap, case, tie, True,
             spot, np.nan)
        direct_stages.append((T, n_T, B, U))
        c_emp_fix.append((T, gap, eps_s * math.sqrt(delta_s), case))
        if U - B <= 0:
            terminated = True
            break

    # containment and empirical contraction constants over the simulated range
    vals = tr.values if tr is not None else np.zeros(0)
    N = vals.shape[0]
    suf_max = np.maximum.accumulate(vals[::-1])[::-1]
    suf_min = np.minimum.accumulate(vals[::-1])[::-1]
    contained = True
    for (t, n_t, b, u) in direct_stages:
        if 0 < n_t <= N:
            hi, lo = suf_max[n_t - 1], suf_min[n_t - 1]
            if hi > u + tol or lo < b - tol:
                contained = False
    for (t, gap_prev, tstar, case) in c_emp_fix:
        n_t = direct_stages[t][1]
        if n_t - 1 >= N:
            continue
        prevB, prevU = direct_stages[t - 1][2], direct_stages[t - 1][3]
        if direct_stages[t][3] < prevU:  # upper endpoint contracted
            slack = prevU - suf_max[n_t - 1]
        else:
            slack = suf_min[n_t - 1] - prevB
        cols["c_emp"][t] = slack / (tstar * gap_prev)

    arrays = {name: np.asarray(v, dtype=np.float64) for name, v in cols.items()}
    # remaining stages in log-space
    if not terminated and T < T_max:
        remaining = T_max - T
        Ls, terms, gaps = convergence_stage_map(params, ledger, L_T, remaining + 1, U - B)
        prev = gaps[:-1]
        contr = np.divide(gaps[1:], prev, out=np.ones(remaining), where=prev > 0)
        nan = np.full(remaining, np.nan)
        extra = {"log_n": Ls[1:], "B": nan, "U": nan, "gap": gaps[1:], "log_n_plus": nan,
                 "term": terms[1:], "contraction": contr, "case": np.full(remaining, 4.0),
                 "tie": np.zeros(remaining), "direct": np.zeros(remaining),
                 "spot_ok": np.ones(remaining), "c_emp": nan}
        arrays = {name: np.concatenate([arrays[name], extra[name]]) for name in arrays}

    return StageSchedule(
        params=params, ledger=ledger,
        T=np.arange(arrays["log_n"].size),
        log_n=arrays["log_n"], B=arrays["B"], U=arrays["U"], gap=arrays["gap"],
        log_n_plus=arrays["log_n_plus"], term=arrays["term"],
        contraction=arrays["contraction"],
        case=arrays["case"].astype(np.int8),
        tie=arrays["tie"].astype(bool),
        direct=arrays["direct"].astype(bool),
        spot_ok=arrays["spot_ok"].astype(bool),
        c_empirical=arrays["c_emp"],
        contained=contained,
        simulated_until=int(N),
        regime_warning=regime_warning,
        terminated=terminated,
    )


# ---------------------------------------------------------------------------
# divergence construction

@dataclass
class DivergenceRecord:
    """Stages of the back-and-forth construction.

    Per stage ``T`` (at index ``n_T``): the interval ``[B_T, U_T]``, the
    fractions of ``a_1..a_{n_T}`` at or above ``U_T`` and at or below
    ``B_T``, whether the stage invariant holds, the empirical erosion
    constant of the preceding stage, and whether the terms generated in the
    preceding stage reach past the new endpoint.
    """

    params: EnvelopeParams
    ledger: ConstantsLedger
    k: int
    log_n_real: np.ndarray
    n: np.ndarray
    B: np.ndarray
    U: np.ndarray
    term: np.ndarray
    frac_above: np.ndarray
    frac_below: np.ndarray
    invariant_ok: np.ndarray
    C_empirical: np.ndarray
    new_term_witness: np.ndarray
    max_validity_violation: float
    erosion_product: float
    erosion_product_integer: float
    U_inf: float
    B_inf: float
    truncated: bool

    @property
    def completed_stages(self):
        return int(self.n.size)

    @property
    def invariants_hold(self):
        return bool(np.all(self.invariant_ok))

    @property
    def oscillation_witnessed(self):
        """Every recorded stage has terms at/above ``U_T`` and at/below ``B_T``."""
        return bool(np.all(self.frac_above > 0) and np.all(self.frac_below > 0))

    def to_dict(self):
        return {
            "k": self.k, "completed_stages": self.completed_stages,
            "n_T": self.n.tolist(), "B_T": self.B.tolist(), "U_T": self.U.tolist(),
            "frac_above": self.frac_above.tolist(), "frac_below": self.frac_below.tolist(),
            "invariant_ok": self.invariant_ok.tolist(),
            "C_empirical": [None if not np.isfinite(c) else float(c) for c in self.C_empirical],
            "new_term_witness": self.new_term_witness.tolist(),
            "max_validity_violation": self.max_validity_violation,
            "erosion_product": self.erosion_product, "U_inf": self.U_inf,
            "B_inf": self.B_inf, "truncated": self.truncated,
            "invariants_hold": self.invariants_hold,
            "oscillation_witnessed": self.oscillation_witnessed,
        }

    def to_csv(self, path=None, header_lines=()):
        T = np.arange(self.n.size)
        gap = self.U - self.B
        return _stage_csv(T, self.log_n_real, self.B, self.U, gap, self.term, path,
                          header_lines)


def _stage_int(L):
    x = math.exp(L)
    return max(1, math.ceil(x * (1 - 1e-12)))


def construct_divergence(params, ledger, k, T_max, n_max=10**6, tail_stages=10**6,
                         tol=1e-12):
    """Build a non-converging admissible sequence stage by stage.

    Stage ``T`` runs the max rule (even ``T``) or the min rule (odd ``T``)
    with the schedule frozen at the stage start, from ``n_T`` to
    ``n_{T+1} = n_T / (2 delta_*^{1/2})``.  The stage indices follow the
    real-valued map in log-space and the integer boundary is
    ``ceil(n_T)``; the frozen ``eps_*, delta_*`` are evaluated at the real
    ``n_T`` so every step stays inside the admissible interval of the true
    schedule (checked at each step).  The upper endpoint erodes on even
    stages, ``U_{T+1} = (1 - C eps_* delta_*^{1/2}) U_T``, and the lower
    endpoint mirrors this on odd stages.

    Returns
    -------
    DivergenceRecord, ProcessTrace

    Raises
    ------
    ValueError
        Outside ``alpha, beta > 0``, ``alpha + beta/2 > 1`` or when the stage
        map does not advance at ``k``.
    """
    if not (params.alpha > 0 and params.beta > 0):
        raise ValueError("the construction needs alpha > 0 and beta > 0")
    if params.alpha + params.beta / 2 <= 1:
        raise ValueError("the construction needs alpha + beta/2 > 1")
    if k < params.n_min:
        raise ValueError(f"k={k} precedes the first valid index {params.n_min}")
    if params.delta(k) >= 0.25:
        raise ValueError("delta_k >= 1/4: the stage map n/(2 delta^{1/2}) does not advance")
    init = np.ones(k)
    init[: k // 2] = 0.0
    tr = ProcessTrace(init, n_max=n_max)
    C = ledger.C_big
    L = math.log(k)
    n_T = k
    B, U = 0.0, 1.0
    rows = []
    worst = 0.0
    prod = 1.0
    prod_int = 1.0
    truncated = False

    def stage_stats(T, n_t, B_, U_):
        a = tr.values[:n_t]
        fa = np.count_nonzero(a >= U_ - tol) / n_t
        fb = np.count_nonzero(a <= B_ + tol) / n_t
        sq = math.sqrt(params.delta(n_t))
        if T % 2 == 0:
            ok = fa >= sq and fb >= 0.5
        else:
            ok = fa >= 0.5 and fb >= sq
        return fa, fb, ok

    fa, fb, ok = stage_stats(0, k, B, U)
    rows.append((L, k, B, U, 0.0, fa, fb, ok, np.nan, True))
    for T in range(T_max):
        eps_s = params.A * L ** (-params.alpha)
        delta_s = params.B * L ** (-params.beta)
        term = eps_s * math.sqrt(delta_s)
        L_next = L - math.log(2.0) - 0.5 * math.log(delta_s)
        n_next = _stage_int(L_next)
        if n_next > n_max:
            truncated = True
            break
        steps = n_next - tr.n
        ns = np.arange(tr.n, n_next, dtype=np.float64)
        lam = 1.0 if T % 2 == 0 else 0.0
        viol = run_schedule(tr, np.full(steps, eps_s), delta_s, lam,
                            check_eps=params.eps_array(ns), check_delta=params.delta_array(ns))
        worst = max(worst, viol)
        factor = 1.0 - C * term
        prod *= factor
        prod_int *= 1.0 - C * params.eps(n_T) * math.sqrt(params.delta(n_T))
        a_next = tr.values[:n_next]
        half = (n_next + 1) // 2
        new = tr.values[n_T:n_next]
        if T % 2 == 0:
            x = np.partition(a_next, n_next - half)[n_next - half]  # half-th largest
            c_emp = (1 - x / U) / term if U > 0 else np.nan
            U_new, B_new = factor * U, B
            witness = bool(np.any(new >= U_new - tol))
        else:
            y = np.partition(a_next, half - 1)[half - 1]  # half-th smallest
            c_emp = (1 - (1 - y) / (1 - B)) / term if B < 1 else np.nan
            U_new, B_new = U, 1 - factor * (1 - B)
            witness = bool(np.any(new <= B_new + tol))
        L, n_T, B, U = L_next, n_next, B_new, U_new
        fa, fb, ok = stage_stats(T + 1, n_T, B, U)
        rows.append((L, n_T, B, U, term, fa, fb, ok, c_emp, witness))

    # A continuation of the real map estimates the limits of U_T and B_T.
    done = len(rows) - 1
    Ls, terms, _ = divergence_stage_map(params, ledger, L, tail_stages)
    U_inf, B_inf = U, B
    for t in range(terms.size):
        f = 1.0 - C * terms[t]
        if (done + t) % 2 == 0:
            U_inf *= f
        else:
            B_inf = 1 - f * (1 - B_inf)

    cols = list(zip(*rows))
    # the term column holds the erosion term of the stage that ended at n_T;
    # shift so that term[T] is the term used from n_T onward
    term_used = np.array(list(cols[4][1:]) + [params.A * L ** (-params.alpha)
                                             * math.sqrt(params.B * L ** (-params.beta))])
    rec = DivergenceRecord(
        params=params, ledger=ledger, k=k,
        log_n_real=np.array(cols[0]), n=np.array(cols[1], dtype=np.int64),
        B=np.array(cols[2]), U=np.array(cols[3]), term=term_used,
        frac_above=np.array(cols[5]), frac_below=np.array(cols[6]),
        invariant_ok=np.array(cols[7], dtype=bool),
        C_empirical=np.array(cols[8], dtype=np.float64),
        new_term_witness=np.array(cols[9], dtype=bool),
        max_validity_violation=float(worst),
        erosion_product=float(prod), erosion_product_integer=float(prod_int),
        U_inf=float(U_inf), B_inf=float(B_inf), truncated=truncated,
    )
    return rec, tr


# ---------------------------------------------------------------------------
# series dichotomy

@dataclass
class SeriesReport:
    """Log-space iteration of the stage map matching the regime.

    ``regime`` is ``"divergent-series"`` when ``alpha + beta/2 <= 1`` (the
    convergence stage map; partial sums grow without bound) and
    ``"convergent-series"`` otherwise (the divergence stage map; partial
    sums are Cauchy).
    """

    regime: str
    exponent: float
    T_max: int
    log_n0: float
    checkpoints: dict
    fitted_exponent: float
    fit_range: tuple
    monotone: bool
    growth: float
    first_T_plus_one: Optional[int]
    tail_bound: Optional[float]
    tail_T0: int
    tail_observed: float
    increments_nondecreasing: Optional[bool]
    doubling_from: Optional[int]
    log_n_over_TlogT: float
    final_log_n: float
    final_gap_or_product: float
    terms: np.ndarray = field(repr=False, default=None)
    log_n: np.ndarray = field(repr=False, default=None)

    @property
    def cauchy_ok(self):
        return bool(self.tail_bound is not None and self.tail_observed <= self.tail_bound)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("terms", "log_n")}
        d["checkpoints"] = {str(k): v for k, v in self.checkpoints.items()}
        d["cauchy_ok"] = self.cauchy_ok
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self, path=None, header_lines=(), stride=1):
        T = np.arange(self.terms.size)[::stride]
        nan = np.full(T.shape, np.nan)
        S = np.cumsum(self.terms)[::stride]
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        buf.write("T,log_n_T,B_T,U_T,gap,term_T,partial_sum\n")
        for t, L, term, s in zip(T, self.log_n[::stride], self.terms[::stride], S):
            buf.write(f"{int(t)},{L:.17g},nan,nan,nan,{term:.17g},{s:.17g}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _fit_exponent(terms, lo, hi):
    T = np.unique(np.geomspace(lo, hi, 200).astype(np.int64))
    T = T[(T >= 3) & (T < terms.size)]
    x = np.log(T * np.log(T))
    y = np.log(terms[T])
    return float(-np.polyfit(x, y, 1)[0])


def series_dichotomy(params, ledger, n_0=None, T_max=10**6, T0=1000,
                     checkpoints=(10**3, 10**4, 10**5, 10**6), log_n0=None):
    """Iterate the stage map of the relevant regime in log-space.

    Parameters
    ----------
    params : EnvelopeParams
    ledger : ConstantsLedger
    n_0 : int, optional
        Starting index (default: smallest index where the map is valid and,
        in the convergent-series regime, ``delta_n < 1/4``).
    T_max : int
        Number of stages.
    T0 : int
        Start of the tail used for the Cauchy bound and the growth check.
    log_n0 : float, optional
        Start in log-space (overrides ``n_0``).

    Raises
    ------
    ValueError
        In the convergent-series regime when ``alpha`` or ``beta`` is zero
        (the back-and-forth construction needs both positive) or when the
        map does not advance at the start.
    """
    p = params.alpha + params.beta / 2
    if log_n0 is None:
        if n_0 is None:
            n_0 = params.n_min
            if p <= 1:
                n_0 = max(n_0, params.stage_floor(upto=float("inf")))
            elif params.beta > 0:
                # first index with delta_n < 1/4, where the map starts to advance
                n_0 = max(n_0, math.floor(math.exp((4 * params.B) ** (1 / params.beta))) + 1)
        if n_0 < params.n_min:
            raise ValueError(f"n_0={n_0} precedes the first valid index {params.n_min}")
        log_n0 = math.log(n_0)
    T_max = int(T_max)
    if p <= 1:
        if log_n0 < 2 * params.alpha + 3 * params.beta:
            raise ValueError("n_0 lies where n eps_n^2 delta_n^3 is not yet increasing")
        Ls, terms, gaps = convergence_stage_map(params, ledger, log_n0, T_max)
        regime = "divergent-series"
        final = float(gaps[-1])
        incr_ok = None
        doubling = None
    else:
        if params.alpha <= 0 or params.beta <= 0:
            raise ValueError("the divergence stage map n/(2 delta^{1/2}) is defined for "
                             "alpha > 0 and beta > 0 only; with beta = 0 the block "
                             "fraction never shrinks")
        if params.B * log_n0 ** (-params.beta) >= 0.25:
            raise ValueError("delta_{n_0} >= 1/4: the divergence stage map does not advance")
        Ls, terms, prods = divergence_stage_map(params, ledger, log_n0, T_max)
        regime = "convergent-series"
        final = float(prods[-1])
        inc = np.diff(Ls)
        incr_ok = bool(np.all(np.diff(inc) >= -1e-12))
        below = np.nonzero(inc < math.log(2))[0]
        doubling = int(below[-1] + 1) if below.size else 0
    S = np.cumsum(terms)
    cps = {int(c): float(S[int(c) - 1]) for c in checkpoints if int(c) <= T_max}
    lo = T0 if T_max >= 10 * T0 else max(3, T_max // 100)
    fitted = _fit_exponent(terms, lo, T_max - 1)
    T0 = min(T0, T_max - 2)
    growth = float(S[-1] - S[T0])
    first = np.nonzero(S > S[T0] + 1)[0]
    tail_bound = None
    if p > 1:
        d = Ls[T0 + 1] - Ls[T0]
        A_sqrtB = params.A * math.sqrt(params.B)
        tail_bound = A_sqrtB * Ls[T0] ** (1 - p) / (d * (p - 1)) if d > 0 else math.inf
    idx = np.arange(3, T_max)
    ratio = float(np.max(Ls[3:] / (idx * np.log(idx)))) if T_max > 3 else float("nan")
    return SeriesReport(
        regime=regime, exponent=p, T_max=T_max, log_n0=float(log_n0),
        checkpoints=cps, fitted_exponent=fitted, fit_range=(lo, T_max - 1),
        monotone=bool(np.all(terms > 0)), growth=growth,
        first_T_plus_one=int(first[0] + 1) if first.size else None,
        tail_bound=tail_bound, tail_T0=T0, tail_observed=growth,
        increments_nondecreasing=incr_ok, doubling_from=doubling,
        log_n_over_TlogT=ratio, final_log_n=float(Ls[-1]),
        final_gap_or_product=final, terms=terms, log_n=Ls,
    )
