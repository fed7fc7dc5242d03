"""Bin-integral discretization of a shape and its L1 accuracy.

``p_n(j)`` is the mass the shape puts on ``((j-1)/n, j/n]``.  The induced
step density at a real scale ``x`` is ``p_x(t) = x p_{floor x}(ceil(t x))``,
and a discretization is strong when ``||p_x - p||_1 <= C x^-kappa``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .shapes import ShapeDensity

__all__ = [
    "DiscretizationFit",
    "DiscretizedShape",
    "QuadratureError",
    "bin_masses",
    "discretize",
    "l1_discretization_error",
    "strong_discretization_check",
]

BIN_TOL = 1e-10
GLOBAL_TOL = 1e-8
# Sub-grid points per bin used to locate crossings of p and the step level.
_SUBGRID = 16
_BISECT_ITERS = 60


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


@dataclass(frozen=True, eq=False)
class DiscretizedShape:
    """Probability vector ``p_n`` over ``1..n`` with its parent shape."""

    n: int
    masses: np.ndarray
    parent: ShapeDensity

    def step_density(self, t, x=None):
        """``p_x(t) = x p_n(ceil(t x))`` with ``x = n`` by default.

        ``x`` must satisfy ``floor(x) == n``; indices beyond ``n`` carry no
        mass.
        """
        x = float(self.n if x is None else x)
        if math.floor(x) != self.n:
            raise ValueError(f"floor({x}) != n={self.n}")
        t = np.asarray(t, dtype=np.float64)
        j = np.ceil(t * x).astype(np.int64)
        ok = (j >= 1) & (j <= self.n)
        out = np.zeros_like(t)
        out[ok] = x * self.masses[j[ok] - 1]
        return out


def _fold_residual(m):
    """Clip round-off negatives and fold ``1 - sum`` into the largest bin so
    the masses sum to one exactly (in compensated summation)."""
    m = np.maximum(m, 0.0)
    big = int(np.argmax(m))
    for _ in range(4):
        r = 1.0 - math.fsum(m)
        if r == 0.0:
            break
        m[big] += r
    return m


def bin_masses(shape, n, method="quad"):
    """Raw bin integrals ``int_{(j-1)/n}^{j/n} p`` for ``j = 1..n``.

    ``method="quad"`` integrates the pdf with vector-valued adaptive
    quadrature (absolute tolerance ``1e-10`` per bin), falling back to
    scalar QAGS per bin when that rule fails.  ``method="cdf"``
    differences the shape's CDF.

    Raises
    ------
    QuadratureError
        If the adaptive rule fails or leaves an error above tolerance.
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if method == "cdf":
        return np.diff(shape.cdf_at(np.arange(n + 1, dtype=np.float64) / n))
    if method != "quad":
        raise ValueError(f"unknown method {method!r}")
    if shape.pdf is None:
        raise ValueError(f"shape {shape.name!r} has no density to discretize")
    left = np.arange(n, dtype=np.float64) / n
    h = 1.0 / n

    def f(s):
        with np.errstate(all="ignore"):
            return h * shape.pdf(left + h * s)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        res = integrate.quad_vec(f, 0.0, 1.0, epsabs=BIN_TOL, epsrel=0.0, norm="max",
                                 limit=200, full_output=True)
    val, err, info = res
    val = np.asarray(val, dtype=np.float64)
    if not np.all(np.isfinite(val)) or info.status != 0 or err > BIN_TOL:
        # quad_vec has no extrapolation; endpoint singularities (Beta(1/2, .))
        # need QAGS, bin by bin
        val = np.array([_scalar_bin(shape, j, n) for j in range(n)])
    return val


def _scalar_bin(shape, j, n):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        v, e = integrate.quad(shape.pdf, j / n, (j + 1) / n, epsabs=BIN_TOL, epsrel=0.0,
                              limit=200)
    if not (math.isfinite(v) and e <= BIN_TOL):
        raise QuadratureError(
            f"bin quadrature failed for {shape.name!r} at n={n}, bin {j + 1} "
            f"(error {e:.3g})"
        )
    return v


def discretize(shape, n, method="quad"):
    """Bin-integral discretization ``p_n(j) = int_{(j-1)/n}^{j/n} p(t) dt``.

    The masses sum to one exactly: the quadrature residual is folded into
    the largest bin.

    Raises
    ------
    QuadratureError
        If quadrature fails or the raw total is off by more than ``1e-8``
        (for instance a non-integrable spike).
    """
    raw = bin_masses(shape, n, method)
    total = math.fsum(raw)
    if not abs(total - 1.0) <= GLOBAL_TOL:
        raise QuadratureError(f"bin masses of {shape.name!r} total {total!r} at n={n}")
    return DiscretizedShape(int(n), _fold_residual(raw.copy()), shape)


def _piece_mass(shape, lo, hi):
    if shape.cdf is not None:
        return shape.cdf(hi) - shape.cdf(lo)
    # 10-point Gauss-Legendre on each (short, smooth) piece.
    x, w = np.polynomial.legendre.leggauss(10)
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    return half * (shape.pdf(mid[:, None] + half[:, None] * x[None, :]) @ w)


def l1_discretization_error(shape, x):
    """``||p_x - p||_1`` on (0, 1).

    On each bin the step level is compared with the pdf piece by piece: the
    bin is cut at every crossing of ``p`` with the level (located on a
    16-point sub-grid and refined by bisection), and on each piece the
    integral of ``|c - p|`` equals ``|c w - int p|``.  Pieces use the
    analytic CDF when available.  The region ``(floor(x)/x, 1)`` carries no
    step mass and contributes its full probability.
    """
    x = float(x)
    if not x >= 1:
        raise ValueError(f"x must be >= 1, got {x}")
    n = int(math.floor(x))
    method = "cdf" if shape.cdf is not None else "quad"
    p_n = discretize(shape, n, method).masses
    level = x * p_n
    j = np.arange(1, n + 1, dtype=np.float64)
    a = (j - 1) / x
    b = j / x
    frac = np.arange(_SUBGRID + 1) / _SUBGRID
    pts = a[:, None] + (b - a)[:, None] * frac[None, :]
    # Keep sub-grid evaluations off the endpoints where p may be singular.
    inner = pts[:, 1:-1]
    with np.errstate(all="ignore"):
        g = shape.pdf(inner) - level[:, None]
    lo = pts[:, :-1].copy()
    hi = pts[:, 1:].copy()
    roots = np.full((n, _SUBGRID - 2), np.nan)
    s = np.sign(g)
    flips = s[:, 1:] * s[:, :-1] < 0
    if np.any(flips):
        r, c = np.nonzero(flips)
        L = inner[r, c].copy()
        R = inner[r, c + 1].copy()
        lev = level[r]
        gl = g[r, c]
        for _ in range(_BISECT_ITERS):
            M = 0.5 * (L + R)
            with np.errstate(all="ignore"):
                gm = shape.pdf(M) - lev
            same = np.sign(gm) == np.sign(gl)
            L = np.where(same, M, L)
            R = np.where(same, R, M)
        roots[r, c] = 0.5 * (L + R)
    # Breakpoints per bin: bin ends plus the crossings.
    brk = np.concatenate([a[:, None], roots, b[:, None]], axis=1)
    brk = np.sort(brk, axis=1)  # NaNs sort last
    valid = ~np.isnan(brk)
    total = []
    left = brk[:, :-1]
    right = brk[:, 1:]
    use = valid[:, 1:]
    lv = np.broadcast_to(level[:, None], left.shape)
    L_, R_, C_ = left[use], right[use], lv[use]
    piece = np.abs(C_ * (R_ - L_) - _piece_mass(shape, L_, R_))
    total.append(math.fsum(piece))
    if n < x:
        total.append(float(1.0 - shape.cdf_at(np.array([n / x]))[0]))
    return math.fsum(total)


@dataclass
class DiscretizationFit:
    """Fitted ``||p_x - p||_1 ~ C x^-kappa`` over a grid of scales."""

    xs: np.ndarray
    errors: np.ndarray
    kappa: float
    C: float

    @property
    def ok(self):
        return self.kappa > 0

    def bound(self, x):
        return self.C * np.asarray(x, dtype=np.float64) ** (-self.kappa)

    def to_dict(self):
        return {"xs": self.xs.tolist(), "errors": self.errors.tolist(),
                "kappa": self.kappa, "C": self.C, "ok": self.ok}


def strong_discretization_check(shape, xs=None):
    """Log-log regression of the L1 error on a grid of scales.

    The default grid has 25 log-spaced, mostly non-integer scales in
    ``[10, 10^4]``.  ``C`` is the smallest constant that makes
    ``C x^-kappa`` dominate every computed error.
    """
    if xs is None:
        xs = np.geomspace(10.0, 1e4, 25)
    xs = np.asarray(xs, dtype=np.float64)
    errs = np.array([l1_discretization_error(shape, x) for x in xs])
    pos = errs > 0
    if pos.sum() < 2:
        return DiscretizationFit(xs, errs, math.inf, 0.0)
    slope = np.polyfit(np.log(xs[pos]), np.log(errs[pos]), 1)[0]
    kappa = float(-slope)
    C = float(np.max(errs[pos] * xs[pos] ** kappa))
    return DiscretizationFit(xs, errs, kappa, C)
