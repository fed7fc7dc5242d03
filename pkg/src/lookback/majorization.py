"""Prefix-sum dominance between finite sequences and the two comparison checks.

``a`` dominates ``b`` when every descending prefix sum of ``a`` is at least
the matching prefix sum of ``b``.  Unlike classical majorization the totals
need not agree.  The checks here run the extremal dynamics on a pair of
initializations and verify that dominance, or exact agreement after
collapsing a top block, persists through a horizon.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
from numba import njit

from .engine import ProcessTrace, run_schedule

__all__ = [
    "DominanceReport",
    "PrefixProfile",
    "ReverseReport",
    "check_dominance_propagation",
    "check_reverse_majorization",
    "collapse_top_m",
    "majorizes",
]

PREFIX_TOL = 1e-12


def _is_exact(seq):
    return any(isinstance(x, Fraction) for x in seq)


@dataclass(frozen=True)
class PrefixProfile:
    """Descending-sorted copy of a sequence with its prefix sums."""

    sorted_desc: np.ndarray
    prefix: np.ndarray

    @classmethod
    def of(cls, seq):
        s = -np.sort(-np.asarray(seq, dtype=np.float64))
        return cls(s, np.cumsum(s))

    @property
    def total(self):
        return float(self.prefix[-1]) if self.prefix.size else 0.0

    def is_concave(self, tol=PREFIX_TOL):
        # Increments are the sorted values, so concavity means they decrease.
        return bool(np.all(np.diff(self.sorted_desc) <= tol))


def majorizes(a, b, tol=PREFIX_TOL):
    """True when every descending prefix sum of ``a`` dominates that of ``b``.

    Each prefix of length ``j`` is compared with slack ``tol * j``.  When
    either input holds :class:`~fractions.Fraction` values the comparison is
    exact.

    Raises
    ------
    ValueError
        On a length mismatch.
    """
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if _is_exact(a) or _is_exact(b):
        pa = pb = Fraction(0)
        for x, y in zip(sorted(map(Fraction, a), reverse=True),
                        sorted(map(Fraction, b), reverse=True)):
            pa += x
            pb += y
            if pa < pb:
                return False
        return True
    A = PrefixProfile.of(a).prefix
    B = PrefixProfile.of(b).prefix
    slack = tol * np.arange(1, len(A) + 1)
    return bool(np.all(A >= B - slack))


def collapse_top_m(a, m, delta_k=None):
    """Replace the ``m`` largest terms by their mean.

    The replaced positions are those of the top ``m`` terms (ties by index).
    When ``delta_k`` is given, ``m`` must also satisfy
    ``m <= floor(delta_k * len(a))``.

    Raises
    ------
    ValueError
        If ``m`` is out of range.
    """
    k = len(a)
    cap = k if delta_k is None else math.floor(delta_k * k)
    if not (1 <= m <= cap):
        raise ValueError(f"m={m!r} outside [1, {cap}]")
    if _is_exact(a):
        vals = [Fraction(x) for x in a]
        order = sorted(range(k), key=lambda i: (vals[i], i))
        top = order[k - m:]
        mean = sum((vals[i] for i in top), Fraction(0)) / m
        for i in top:
            vals[i] = mean
        return vals
    arr = np.array(a, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    top = order[k - m:]
    arr[top] = math.fsum(arr[top]) / m
    return arr


def _instance_hash(*parts):
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
        else:
            h.update(repr(p).encode())
    return h.hexdigest()[:16]


@njit(cache=True)
def _prefix_scan(a, b, k, tol):
    """Check descending prefix dominance of ``a[:m]`` over ``b[:m]`` for
    every ``m`` from ``k`` to ``len(a)``.

    Keeps both prefixes sorted (insertion by shifting) and rescans the prefix
    sums at each length.  Returns (first_bad_m, bad_j, max_deficit, pointwise_bad_m).
    """
    N = a.shape[0]
    sa = np.empty(N)
    sb = np.empty(N)
    first_bad = -1
    bad_j = -1
    worst = -np.inf
    point_bad = -1
    for m in range(N):
        # insert a[m] and b[m] into the descending arrays
        x = a[m]
        i = m
        while i > 0 and sa[i - 1] < x:
            sa[i] = sa[i - 1]
            i -= 1
        sa[i] = x
        y = b[m]
        i = m
        while i > 0 and sb[i - 1] < y:
            sb[i] = sb[i - 1]
            i -= 1
        sb[i] = y
        if m + 1 < k:
            continue
        if m + 1 > k and point_bad < 0 and a[m] < b[m] - tol:
            point_bad = m + 1
        pa = 0.0
        pb = 0.0
        for j in range(m + 1):
            pa += sa[j]
            pb += sb[j]
            d = pb - pa
            if d > worst:
                worst = d
            if first_bad < 0 and d > tol * (j + 1):
                first_bad = m + 1
                bad_j = j + 1
    return first_bad, bad_j, worst, point_bad


@dataclass
class DominanceReport:
    """Outcome of a dominance-propagation run.

    ``first_violation`` is the first length ``m`` at which a prefix of the
    dominated trace exceeded the dominating one (``None`` if never) and
    ``offending_prefix`` the prefix length.  ``max_prefix_deficit`` is the
    largest ``B_j - A_j`` seen (non-positive when dominance holds strictly).
    """

    instance_hash: str
    k: int
    horizon: int
    first_violation: Optional[int]
    offending_prefix: Optional[int]
    max_prefix_deficit: float
    pointwise_violation: Optional[int]
    lambda_schedule: str

    @property
    def ok(self):
        return self.first_violation is None and self.pointwise_violation is None

    def to_json(self):
        d = asdict(self)
        d["ok"] = self.ok
        return json.dumps(d, sort_keys=True)


def _schedule_arrays(params, start, stop):
    ns = np.arange(start, stop, dtype=np.float64)
    return params.eps_array(ns), params.delta_array(ns)


def check_dominance_propagation(a_init, b_init, params, horizon, lam=None, seed=0,
                                tol=1e-10):
    """Run ``a`` under the max rule and ``b`` under an interval rule and
    verify prefix dominance at every length and ``a_m >= b_m`` for ``m > k``.

    Parameters
    ----------
    a_init, b_init : array_like
        Initializations of equal length ``k >= params.n_min`` with ``a``
        dominating ``b``.
    params : EnvelopeParams
    horizon : int
        Final trace length.
    lam : array_like or float, optional
        Interval coefficients for ``b`` (per step); default i.i.d. uniform
        draws from ``seed``.
    tol : float
        Per-entry slack; prefix ``j`` is allowed ``tol * j``.

    Raises
    ------
    ValueError
        If the initializations do not satisfy the dominance precondition.
    """
    a_init = np.asarray(a_init, dtype=np.float64)
    b_init = np.asarray(b_init, dtype=np.float64)
    if a_init.shape != b_init.shape:
        raise ValueError("initializations differ in length")
    k = a_init.shape[0]
    if k < params.n_min:
        raise ValueError(f"k={k} precedes the first valid index {params.n_min}")
    if not majorizes(a_init, b_init):
        raise ValueError("a_init does not dominate b_init")
    steps = max(0, horizon - k)
    eps, delta = _schedule_arrays(params, k, k + steps)
    if lam is None:
        lam_arr = np.random.default_rng(seed).random(steps)
        lam_name = f"iid-uniform(seed={seed})"
    else:
        lam_arr = np.broadcast_to(np.asarray(lam, dtype=np.float64), (steps,))
        lam_name = "given"
    ta = ProcessTrace(a_init, n_max=max(horizon, k))
    tb = ProcessTrace(b_init, n_max=max(horizon, k))
    run_schedule(ta, eps, delta, 1.0)
    run_schedule(tb, eps, delta, lam_arr)
    bad, j, worst, pbad = _prefix_scan(ta.values, tb.values, k, tol)
    return DominanceReport(
        instance_hash=_instance_hash(a_init, b_init, params.to_dict(), horizon, lam_name),
        k=k,
        horizon=horizon,
        first_violation=None if bad < 0 else int(bad),
        offending_prefix=None if bad < 0 else int(j),
        max_prefix_deficit=float(worst),
        pointwise_violation=None if pbad < 0 else int(pbad),
        lambda_schedule=lam_name,
    )


@dataclass
class ReverseReport:
    """Outcome of the collapsed-top-block comparison.

    ``guard_trip`` is the first index ``n`` whose collapsed-trace term
    exceeded the ``m``-th largest initial value (ending the comparison);
    ``first_mismatch`` the first index where the two traces differed by more
    than the tolerance while the guard held.
    """

    instance_hash: str
    k: int
    m: int
    horizon: int
    checked_until: int
    guard_trip: Optional[int]
    first_mismatch: Optional[int]
    max_abs_diff: float

    @property
    def ok(self):
        return self.first_mismatch is None

    def to_json(self):
        d = asdict(self)
        d["ok"] = self.ok
        return json.dumps(d, sort_keys=True)


def check_reverse_majorization(a_init, m, params, horizon, tol=1e-10):
    """Compare the max-rule traces of ``a`` and of ``a`` with its top ``m``
    terms collapsed to their mean.

    While every collapsed-trace term stays at or below the ``m``-th largest
    initial value, the two traces must coincide.

    Raises
    ------
    ValueError
        If ``m`` exceeds the block size at ``k`` or the block sizes are not
        non-decreasing over the horizon.
    """
    a_init = np.asarray(a_init, dtype=np.float64)
    k = a_init.shape[0]
    if k < params.n_min:
        raise ValueError(f"k={k} precedes the first valid index {params.n_min}")
    steps = max(0, horizon - k)
    eps, delta = _schedule_arrays(params, k, k + steps)
    d_k = params.delta(k)
    if not 1 <= m <= math.floor(d_k * k):
        raise ValueError(f"m={m} outside [1, floor(delta_k k)={math.floor(d_k * k)}]")
    blocks = np.floor(delta * np.arange(k, k + steps))
    if steps and np.any(np.diff(blocks) < 0):
        raise ValueError("block sizes floor(delta_n n) decrease within the horizon")
    b_init = collapse_top_m(a_init, m)
    guard = float(np.sort(a_init)[::-1][m - 1])
    ta = ProcessTrace(a_init, n_max=max(horizon, k))
    tb = ProcessTrace(b_init, n_max=max(horizon, k))
    run_schedule(ta, eps, delta, 1.0)
    run_schedule(tb, eps, delta, 1.0)
    av = ta.values[k:]
    bv = tb.values[k:]
    over = np.nonzero(bv > guard)[0]
    stop = over[0] if over.size else bv.shape[0]
    diff = np.abs(av[:stop] - bv[:stop])
    scale = np.maximum(1.0, np.abs(av[:stop]))
    bad = np.nonzero(diff > tol * scale)[0]
    return ReverseReport(
        instance_hash=_instance_hash(a_init, m, params.to_dict(), horizon),
        k=k,
        m=m,
        horizon=horizon,
        checked_until=int(k + stop),
        guard_trip=int(k + over[0] + 1) if over.size else None,
        first_mismatch=int(k + bad[0] + 1) if bad.size else None,
        max_abs_diff=float(diff.max()) if diff.size else 0.0,
    )
