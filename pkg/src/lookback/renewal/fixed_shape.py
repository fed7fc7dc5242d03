"""Fixed-shape recursions ``a_{n+1} = E_{j ~ p_n}[a_j]`` and the limit formula.

With ``F(x) = a_ceil(x)`` the recursion becomes ``F(x) = E[F(T x)] + eps(x)``,
and multiplicative renewal theory gives

    lim F = E[F(T~)] + (1/mu) int_1^inf eps(x)/x dx,

where ``T~`` lives on (0, 1), so ``E[F(T~)] = a_1``.

When the shape's CDF is a polynomial ``P(t) = sum_r c_r t^r`` both the
recursion and the error integral reduce to running sums

    W_r(n) = sum_{j<=n} a_j (j^r - (j-1)^r),

so one step costs O(deg P) instead of O(n).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from ..engine import ProcessTrace, TraceCapacityError, default_n_max
from .discretize import discretize, strong_discretization_check

__all__ = [
    "FixedShapeResult",
    "LimitFormulaReport",
    "epsilon_integral",
    "run_fixed_shape",
    "verify_limit_formula",
]

TAIL_FRACTION = 0.1
GENERIC_N_LIMIT = 50_000


def _diff_table(deg):
    """Row r holds integer coefficients of j^r - (j-1)^r as a polynomial in j."""
    D = np.zeros((deg + 1, deg + 1))
    for r in range(1, deg + 1):
        for i in range(r):
            D[r, i] = math.comb(r, i) * (-1) ** (r - 1 - i)
    return D


@njit(cache=True)
def _poly_inc(D, r, j):
    v = 0.0
    for i in range(r - 1, -1, -1):
        v = v * j + D[r, i]
    return v


@njit(cache=True)
def _poly_kernel(a, k, N, c, D):
    """Fill ``a[k:N]`` from the polynomial-CDF recursion.

    Also returns ``Wn[n, r] = W_r(n) / n^r`` for ``n = 1..N-1`` (row 0
    unused), which the error integral needs.
    """
    deg = c.shape[0] - 1
    W = np.zeros(deg + 1)
    comp = np.zeros(deg + 1)
    Wn = np.zeros((N, deg + 1))
    for n in range(1, N):
        x = a[n - 1]
        for r in range(1, deg + 1):
            inc = x * _poly_inc(D, r, float(n))
            t = W[r] + inc
            if abs(W[r]) >= abs(inc):
                comp[r] += (W[r] - t) + inc
            else:
                comp[r] += (inc - t) + W[r]
            W[r] = t
        npow = 1.0
        for r in range(1, deg + 1):
            npow *= n
            Wn[n, r] = (W[r] + comp[r]) / npow
        if n >= k:
            v = 0.0
            for r in range(1, deg + 1):
                v += c[r] * Wn[n, r]
            a[n] = v
    return Wn


@dataclass
class FixedShapeResult:
    """Outcome of a fixed-shape run.

    ``limit`` is the mean of the last 10% of the terms and ``stabilization``
    the spread ``max - min`` over the same window.
    """

    trace: ProcessTrace
    shape: object
    N: int
    k: int
    limit: float
    stabilization: float
    route: str
    kappa: float
    C: float
    Wn: np.ndarray = None

    def to_dict(self):
        return {"shape": self.shape.name, "N": self.N, "k": self.k, "limit": self.limit,
                "stabilization": self.stabilization, "route": self.route,
                "kappa": self.kappa, "C": self.C}


def _window(N):
    return max(0, int(math.ceil((1 - TAIL_FRACTION) * N)) - 1)


def run_fixed_shape(shape, init, N, n_max=None, route="auto", check_grid=None,
                    keep_trace=True):
    """Iterate ``a_{n+1} = sum_j p_n(j) a_j`` with ``p_n = discretize(shape, n)``
    from the initial terms up to length ``N``.

    Parameters
    ----------
    shape : ShapeDensity
    init : array_like
        ``a_1..a_k``, ``k >= 1``.
    N : int
        Final length.
    route : {"auto", "polynomial", "generic"}
        ``polynomial`` uses running sums (CDF must be a polynomial);
        ``generic`` recomputes bin masses for every ``n`` (O(N^2), capped at
        ``50_000`` terms).
    check_grid : array_like, optional
        Scales for the strong-discretization fit; a non-positive fitted
        exponent only warns.

    Raises
    ------
    TraceCapacityError
        If ``N`` exceeds ``n_max``.
    """
    a0 = np.asarray(init, dtype=np.float64)
    if a0.ndim != 1 or a0.size == 0:
        raise ValueError("init must be a non-empty 1-D array")
    if shape.pdf is None:
        raise ValueError(f"shape {shape.name!r} has no density")
    n_max = default_n_max() if n_max is None else int(n_max)
    N = int(N)
    k = a0.size
    if N > n_max:
        raise TraceCapacityError(f"N={N} exceeds n_max={n_max}")
    shape.mu  # finite log-moment required
    fit = strong_discretization_check(shape, check_grid)
    if not fit.ok:
        warnings.warn(f"strong discretization check failed for {shape.name!r} "
                      f"(kappa={fit.kappa:.3g})", RuntimeWarning, stacklevel=2)
    if route == "auto":
        route = "polynomial" if shape.is_polynomial else "generic"
    a = np.zeros(max(N, k))
    a[:k] = a0
    Wn = None
    if route == "polynomial":
        if not shape.is_polynomial:
            raise ValueError(f"shape {shape.name!r} has no polynomial CDF")
        c = np.asarray(shape.cdf_poly, dtype=np.float64)
        if c[0] != 0.0:
            raise ValueError("polynomial CDF must vanish at 0")
        Wn = _poly_kernel(a, k, a.size, c, _diff_table(c.size - 1))
    elif route == "generic":
        if N > GENERIC_N_LIMIT:
            raise ValueError(f"generic route is O(N^2); N={N} exceeds {GENERIC_N_LIMIT}")
        for n in range(k, N):
            p = discretize(shape, n, method="cdf").masses
            a[n] = p @ a[:n]
    else:
        raise ValueError(f"unknown route {route!r}")
    if N < k:
        a = a[:k]
    tail = a[_window(a.size):]
    trace = None
    if keep_trace:
        trace = ProcessTrace(a0, n_max=max(n_max, a.size))
        trace.extend(a[k:])
    return FixedShapeResult(trace, shape, a.size, k, float(tail.mean()),
                            float(tail.max() - tail.min()), route, fit.kappa, fit.C,
                            Wn)


def _gl_generic_integral(shape, a, n_hi, order=8):
    """``int_1^{n_hi} eps(x)/x dx`` by Gauss-Legendre on each unit interval,
    with ``E[F(T x)]`` from CDF differences against the trace (O(n) per
    node)."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    total = []
    for n in range(1, n_hi):
        xs = n + 0.5 * (xg + 1.0)
        j = np.arange(1, n + 2, dtype=np.float64)
        ef = np.empty(order)
        for q, x in enumerate(xs):
            hi = shape.cdf_at(np.minimum(j / x, 1.0))
            lo = shape.cdf_at((j - 1) / x)
            ef[q] = (hi - lo) @ a[: n + 1]
        eps = a[n] - ef
        total.append(0.5 * float(np.dot(wg, eps / xs)))
    return math.fsum(total)


def _poly_closed_integral(c, a, Wn, n_hi):
    """Exact ``int_1^{n_hi} eps(x)/x dx`` for a polynomial CDF.

    On ``(n, n+1]``, ``eps(x) = -sum_r c_r (W_r(n) - a_{n+1} n^r) x^-r``, so
    each unit interval integrates in closed form.
    """
    n = np.arange(1, n_hi, dtype=np.float64)
    a_next = a[1:n_hi]
    total = np.zeros(n.size)
    l1p = np.log1p(1.0 / n)
    for r in range(1, c.size):
        if c[r] == 0.0:
            continue
        # (W_r/n^r - a_{n+1}) * n^r * int_n^{n+1} x^{-r-1} dx
        seg = -np.expm1(-r * l1p) / r
        total -= c[r] * (Wn[1:n_hi, r] - a_next) * seg
    return math.fsum(total.tolist())


def epsilon_integral(shape, values, route="auto", Wn=None):
    """``int_1^N eps(x)/x dx`` for a trace ``a_1..a_N``.

    ``route="closed"`` uses the polynomial-CDF closed form,
    ``route="quadrature"`` Gauss-Legendre on every unit interval (O(N^2)).
    """
    a = np.asarray(values, dtype=np.float64)
    N = a.size
    if route == "auto":
        route = "closed" if shape.is_polynomial else "quadrature"
    if route == "closed":
        c = np.asarray(shape.cdf_poly, dtype=np.float64)
        if Wn is None:
            # Rebuild the running sums from the values (no recursion).
            Wn = _running_scaled_sums(a, c.size - 1)
        return _poly_closed_integral(c, a, Wn, N)
    if route == "quadrature":
        return _gl_generic_integral(shape, a, N)
    raise ValueError(f"unknown route {route!r}")


def _running_scaled_sums(a, deg):
    N = a.size
    j = np.arange(1, N + 1, dtype=np.float64)
    Wn = np.zeros((N, deg + 1))
    for r in range(1, deg + 1):
        inc = np.polynomial.polynomial.polyval(j, _diff_table(deg)[r, :r])
        W = np.cumsum(a * inc)
        Wn[1:, r] = W[:-1] / j[:-1] ** r
    return Wn


@dataclass
class LimitFormulaReport:
    """Both sides of the limit formula for one run.

    ``rhs = a_1 + eps_integral / mu``; ``tail_bound`` bounds the omitted
    ``(1/mu) int_N^inf |eps(x)|/x dx`` through the fitted discretization
    error and half the range of the trace.
    """

    limit_estimate: float
    stabilization: float
    a1: float
    eps_integral: float
    mu: float
    rhs: float
    tail_bound: float
    tolerance: float
    difference: float
    route: str

    @property
    def ok(self):
        return abs(self.difference) <= self.tolerance

    def to_dict(self):
        d = asdict(self)
        d["ok"] = self.ok
        return d


def verify_limit_formula(result, route="auto", stab_tol=1e-3, base_tol=1e-3):
    """Reconcile the limit estimate of a fixed-shape run with the right side
    of the multiplicative renewal formula computed from the trace itself.

    Raises
    ------
    ValueError
        If the trace has not stabilized (spread above ``stab_tol``).
    """
    if not result.stabilization <= stab_tol:
        raise ValueError(f"trace not stabilized (spread {result.stabilization:.3g})")
    shape = result.shape
    a = result.trace.values if result.trace is not None else None
    if a is None:
        raise ValueError("result carries no trace")
    if route == "auto":
        route = "closed" if shape.is_polynomial else "quadrature"
    integral = epsilon_integral(shape, a, route,
                                result.Wn if route == "closed" else None)
    mu = shape.mu
    half_range = 0.5 * float(a.max() - a.min())
    N = a.size
    if math.isfinite(result.kappa) and result.kappa > 0:
        tail = half_range * result.C * N ** (-result.kappa) / (result.kappa * mu)
    else:
        tail = 0.0 if half_range == 0 else math.inf
    rhs = float(a[0]) + integral / mu
    return LimitFormulaReport(
        limit_estimate=result.limit,
        stabilization=result.stabilization,
        a1=float(a[0]),
        eps_integral=integral,
        mu=mu,
        rhs=rhs,
        tail_bound=tail,
        tolerance=max(base_tol, tail),
        difference=rhs - result.limit,
        route=route,
    )
