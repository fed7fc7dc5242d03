"""Ladder simulation, the limiting overshoot law and the renewal identity.

``S_m = Y_1 + ... + Y_m`` with ``Y = log(1/T)``.  For a level ``s`` the
first passage ``tau_s`` is the first ``m`` with ``S_m >= s`` and the
overshoot is ``R_s = S_{tau_s} - s``.  For non-lattice ``Y`` with mean
``mu``, ``R_s`` converges to the law with density ``P(Y > r) / mu``, and
``e^-R`` has density ``P(T < t) / (mu t)`` on (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, stats
from scipy.interpolate import CubicSpline, PchipInterpolator

__all__ = [
    "DRIReport",
    "OvershootLaw",
    "OvershootSample",
    "RenewalIdentityReport",
    "RenewalMeasureEstimate",
    "SpikeTrain",
    "dri_mesh_check",
    "ks_tolerance",
    "overshoot_law",
    "probe_function",
    "renewal_identity_check",
    "renewal_measure",
    "simulate_overshoot",
]

NORMALIZATION_TOL = 1e-6
CHUNK = 1 << 18


def ks_tolerance(samples):
    """Asymptotic-regime KS tolerance ``1.63/sqrt(samples) + 0.01``."""
    return 1.63 / math.sqrt(samples) + 0.01


# ---------------------------------------------------------------------------
# limiting law

@dataclass(frozen=True, eq=False)
class OvershootLaw:
    """Limit law of the overshoot and of the tilted fraction ``e^-R``.

    Attributes
    ----------
    shape : ShapeDensity
    mu : float
        Log-moment of the shape.
    """

    shape: object
    mu: float
    _grid: tuple = field(default=None, repr=False)

    def density(self, r):
        """``P(Y > r) / mu`` for ``r >= 0``."""
        r = np.asarray(r, dtype=np.float64)
        v = self.shape.cdf_at(np.exp(-np.maximum(r, 0.0))) / self.mu
        return np.where(r >= 0, v, 0.0)

    def tilted_density(self, t):
        """``P(T < t) / (mu t)`` on (0, 1)."""
        t = np.asarray(t, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = self.shape.cdf_at(t) / (self.mu * t)
        return np.where((t > 0) & (t < 1), v, 0.0)

    def normalization(self):
        """Integrals of both densities, computed independently.

        The overshoot density is integrated over ``[0, inf)`` in ``r``; the
        tilted density over ``(0, 1)`` in ``t``.
        """
        r_int = integrate.quad(lambda r: float(self.density(r)), 0.0, np.inf,
                               epsabs=1e-12, epsrel=1e-12, limit=400)[0]
        t_int = integrate.quad(lambda t: float(self.tilted_density(t)), 0.0, 1.0,
                               epsabs=1e-12, epsrel=1e-12, limit=400)[0]
        return r_int, t_int

    def _cdf_table(self):
        if self._grid is None:
            # Right end where the tail mass is negligible.
            r_hi = 1.0
            while float(self.density(r_hi)) > 1e-13 and r_hi < 1e4:
                r_hi *= 1.5
            r = np.linspace(0.0, r_hi, 4097)
            pieces = [integrate.quad(lambda u: float(self.density(u)), a, b,
                                     epsabs=1e-14, epsrel=1e-12)[0]
                      for a, b in zip(r[:-1], r[1:])]
            c = np.concatenate(([0.0], np.cumsum(pieces)))
            object.__setattr__(self, "_grid", (r, c / c[-1], PchipInterpolator(r, c / c[-1])))
        return self._grid

    def cdf(self, r):
        """``P(R <= r)`` from a cumulative quadrature table (monotone cubic
        interpolation, error well below ``1e-8``)."""
        r_grid, _, interp = self._cdf_table()
        r = np.asarray(r, dtype=np.float64)
        return np.where(r <= 0, 0.0, np.where(r >= r_grid[-1], 1.0,
                                              interp(np.clip(r, 0, r_grid[-1]))))

    def tilted_cdf(self, t):
        """``P(e^-R <= t) = 1 - P(R < log(1/t))``."""
        t = np.asarray(t, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return np.where(t <= 0, 0.0, np.where(t >= 1, 1.0, 1.0 - self.cdf(-np.log(t))))


def overshoot_law(shape):
    """Limit law of the overshoot for a non-lattice shape.

    Raises
    ------
    ValueError
        For lattice shapes, where the non-lattice limit does not exist, or
        if either density fails to integrate to one within ``1e-6``.
    """
    if shape.lattice:
        raise ValueError(f"shape {shape.name!r} is lattice; the overshoot law is undefined")
    law = OvershootLaw(shape, shape.mu)
    r_int, t_int = law.normalization()
    if abs(r_int - 1) > NORMALIZATION_TOL or abs(t_int - 1) > NORMALIZATION_TOL:
        raise ValueError(f"overshoot law not normalized: {r_int!r}, {t_int!r}")
    return law


# ---------------------------------------------------------------------------
# ladder simulation

def _streams(seed, samples, chunk):
    n_chunks = max(1, -(-samples // chunk))
    seqs = np.random.SeedSequence(seed).spawn(n_chunks)
    sizes = [chunk] * (n_chunks - 1) + [samples - chunk * (n_chunks - 1)]
    return [(np.random.default_rng(s), m) for s, m in zip(seqs, sizes)]


def _ladder(shape, s, m, rng, eta=None, max_steps=10**7):
    """Run ``m`` ladder paths to level ``s``.

    Returns overshoots, passage times and, if ``eta`` is given, the sums
    ``sum_{n < tau} eta(s - S_n)``.
    """
    S = np.zeros(m)
    tau = np.zeros(m, dtype=np.int64)
    acc = np.zeros(m) if eta is not None else None
    active = np.arange(m)
    steps = 0
    while active.size:
        if eta is not None:
            acc[active] += eta(s - S[active])
        S[active] += shape.sample_Y(rng, active.size)
        tau[active] += 1
        active = active[S[active] < s]
        steps += 1
        if steps > max_steps:
            raise RuntimeError("ladder did not cross the level (degenerate increments?)")
    return S - s, tau, acc


@dataclass
class OvershootSample:
    """Simulated overshoots ``R_s`` and passage times."""

    s: float
    seed: int
    R: np.ndarray
    tau: np.ndarray

    @property
    def samples(self):
        return self.R.shape[0]

    def ks(self, law):
        """KS distance between the empirical ``R_s`` and ``law``."""
        return float(stats.kstest(self.R, law.cdf).statistic)

    def ks_tilted(self, law):
        """KS distance between ``e^-R_s`` and the tilted law."""
        return float(stats.kstest(np.exp(-self.R), law.tilted_cdf).statistic)

    def ks_ok(self, law):
        return self.ks(law) <= ks_tolerance(self.samples)


def simulate_overshoot(shape, s, samples, seed=0, chunk=CHUNK):
    """I.i.d. ladder paths up to level ``s``; returns the overshoots.

    Samples are drawn in chunks from independent streams spawned off
    ``seed``, so the result does not depend on how chunks are scheduled.

    Raises
    ------
    NotSampleableError
        If the shape cannot be sampled.
    """
    if not s > 0:
        raise ValueError(f"level must be positive, got {s!r}")
    shape.mu  # finite log-moment required
    Rs, taus = [], []
    for rng, m in _streams(seed, int(samples), chunk):
        R, tau, _ = _ladder(shape, s, m, rng)
        Rs.append(R)
        taus.append(tau)
    return OvershootSample(float(s), seed, np.concatenate(Rs), np.concatenate(taus))


# ---------------------------------------------------------------------------
# renewal identity

def _expect_shift(G, shape, s):
    """``E[G(s - Y)]`` by quadrature in ``y`` with a break at ``y = s``."""
    f = lambda y: float(G(s - y)) * float(shape.y_density(y))
    if s > 0:
        a = integrate.quad(f, 0.0, s, epsabs=1e-12, epsrel=1e-12, limit=400)[0]
        b = integrate.quad(f, s, np.inf, epsabs=1e-12, epsrel=1e-12, limit=400)[0]
        return a + b
    return integrate.quad(f, 0.0, np.inf, epsabs=1e-12, epsrel=1e-12, limit=400)[0]


def _eta_interpolant(G, shape, s_max, points):
    grid = np.linspace(0.0, s_max, points)
    vals = np.array([float(G(x)) - _expect_shift(G, shape, x) for x in grid])
    spline = CubicSpline(grid, vals)
    # Error estimate: the half-resolution spline against the full one.
    coarse = CubicSpline(grid[::2], vals[::2])
    mid = grid[1::2]
    err = float(np.max(np.abs(coarse(mid) - vals[1::2]))) / 16.0 if mid.size else 0.0
    return spline, err


def probe_function(name, **kw):
    """Named bounded functions for the renewal identity.

    ``constant`` (``value``), ``exponential`` (``exp(-max(s, 0))``) and
    ``smoothed_step`` (logistic step at ``center`` with width ``width``).
    """
    if name == "constant":
        c = float(kw.get("value", 1.0))
        return lambda s: np.full(np.shape(s), c)
    if name == "exponential":
        return lambda s: np.exp(-np.maximum(np.asarray(s, dtype=np.float64), 0.0))
    if name == "smoothed_step":
        c = float(kw.get("center", 2.0))
        w = float(kw.get("width", 0.5))
        if not w > 0:
            raise ValueError("width must be positive")
        return lambda s: 0.5 * (1.0 + np.tanh((np.asarray(s, dtype=np.float64) - c) / (2 * w)))
    raise ValueError(f"unknown probe function {name!r}")


@dataclass
class RenewalIdentityReport:
    """Monte Carlo evaluation of ``G(s) = E[G(-R_s)] + E[sum eta(s - S_n)]``.

    Each row of ``rows`` holds ``s``, ``G(s)``, the two right-side terms, the
    standard error of their sum, the tolerance and the verdict.
    """

    shape: str
    samples: int
    seed: int
    eta_interp_err: float
    quad_budget: float
    rows: list

    @property
    def ok(self):
        return all(r["ok"] for r in self.rows)

    def to_dict(self):
        d = asdict(self)
        d["ok"] = self.ok
        return d


def _check_bounded(G, lo, hi, bound):
    xs = np.linspace(lo, hi, 20001)
    v = np.array([float(G(x)) for x in xs[:: 50]] + list(np.atleast_1d(G(xs))))
    if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > bound:
        raise ValueError("G must be bounded (non-finite or huge values on the test range)")


def renewal_identity_check(G, shape, s_grid, samples, seed=0, quad_budget=1e-6,
                           eta_points=1025, bound=1e6):
    """Check the stopped renewal identity at each level in ``s_grid``.

    ``eta(s) = G(s) - E[G(s - Y)]`` is tabulated by quadrature on
    ``[0, max(s_grid)]`` and interpolated by a cubic spline; the reported
    interpolation error is added to the tolerance.  A level passes when
    ``|G(s) - rhs| <= 3 se + quad_budget + interp_err``.

    Parameters
    ----------
    G : callable
        Vectorized bounded function on the real line.

    Raises
    ------
    ValueError
        If ``G`` is not bounded on the range the check visits.
    """
    s_grid = [float(s) for s in s_grid]
    if not s_grid or min(s_grid) <= 0:
        raise ValueError("levels must be positive")
    mu = shape.mu
    s_max = max(s_grid)
    _check_bounded(G, -60.0 * mu - 10.0, s_max, bound)
    spline, ierr = _eta_interpolant(G, shape, s_max, eta_points)
    eta = lambda x: spline(x)
    rows = []
    for i, s in enumerate(s_grid):
        over, run = [], []
        for rng, m in _streams([seed, i], int(samples), CHUNK):
            R, _, acc = _ladder(shape, s, m, rng, eta=eta)
            over.append(np.asarray(G(-R), dtype=np.float64))
            run.append(acc)
        over = np.concatenate(over)
        run = np.concatenate(run)
        tot = over + run
        se = float(tot.std(ddof=1) / math.sqrt(tot.size))
        lhs = float(G(s))
        rhs = float(tot.mean())
        tol = 3 * se + quad_budget + ierr
        rows.append({"s": s, "G": lhs, "overshoot_term": float(over.mean()),
                     "eta_term": float(run.mean()), "rhs": rhs, "se": se,
                     "diff": rhs - lhs, "tol": tol, "ok": abs(rhs - lhs) <= tol})
    return RenewalIdentityReport(shape.name, int(samples), seed, ierr, quad_budget, rows)


# ---------------------------------------------------------------------------
# renewal measure

@dataclass
class RenewalMeasureEstimate:
    """Monte Carlo estimates of ``sigma([a, b]) = sum_n P(S_n in [a, b])``.

    ``blackwell`` holds ``(b - a)/mu`` for comparison far from the origin.
    """

    intervals: np.ndarray
    estimates: np.ndarray
    se: np.ndarray
    blackwell: np.ndarray
    samples: int
    seed: int

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in asdict(self).items()}


def renewal_measure(shape, intervals, samples, seed=0):
    """Count ladder points (including ``S_0 = 0``) in each interval."""
    iv = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
    if np.any(iv[:, 1] < iv[:, 0]):
        raise ValueError("intervals need a <= b")
    top = float(iv[:, 1].max())
    counts = []
    for rng, m in _streams(seed, int(samples), CHUNK):
        c = ((iv[:, 0] <= 0) & (0 <= iv[:, 1])).astype(np.float64)[None, :].repeat(m, 0)
        S = np.zeros(m)
        active = np.arange(m)
        while active.size:
            S[active] += shape.sample_Y(rng, active.size)
            x = S[active]
            c[active] += (iv[None, :, 0] <= x[:, None]) & (x[:, None] <= iv[None, :, 1])
            active = active[x <= top]
        counts.append(c)
    c = np.concatenate(counts)
    return RenewalMeasureEstimate(iv, c.mean(0), c.std(0, ddof=1) / math.sqrt(c.shape[0]),
                                  (iv[:, 1] - iv[:, 0]) / shape.mu, int(samples), seed)


# ---------------------------------------------------------------------------
# direct Riemann integrability diagnostic

class SpikeTrain:
    """Pathological non-DRI stub: ``eta = 1`` on ``[n, n + 2^-n]`` for each
    integer ``n >= 1`` and ``0`` elsewhere.

    Its integral is finite, but every mesh cell touching a spike has
    supremum 1, so the upper mesh sum over ``(0, s]`` grows like ``h s``
    and diverges with the domain.  Exact cell bounds are provided because
    sampling would miss the narrow spikes.
    """

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        n = np.floor(s)
        return np.where((n >= 1) & (s - n <= np.exp2(-np.maximum(n, 1))), 1.0, 0.0)

    def mesh_bounds(self, lo, hi):
        """Infimum and supremum over cells ``(lo, hi]``."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        sup = np.zeros_like(lo)
        inf = np.zeros_like(lo)
        for off in (0.0, 1.0):
            n = np.floor(lo) + off
            w = np.exp2(-np.maximum(n, 1))
            hit = (n >= 1) & (n <= hi) & (n + w > lo)
            sup = np.maximum(sup, hit.astype(np.float64))
            inside = (n >= 1) & (n <= lo) & (n + w >= hi)
            inf = np.maximum(inf, inside.astype(np.float64))
        # spikes starting strictly inside the cell beyond lo+1
        n = np.floor(hi)
        sup = np.maximum(sup, ((n >= 1) & (n > lo) & (n <= hi)).astype(np.float64))
        return inf, sup


@dataclass
class DRIReport:
    """Lower/upper mesh sums on ``(0, s_cap]`` plus the tail envelope.

    ``slope`` is the fitted exponent of ``gap ~ h^slope``; ``far_share`` is
    the fraction of the gap at the smallest ``h`` coming from
    ``(s_cap/2, s_cap]``.  A DRI-like function has a closing gap
    (``slope >= 1/2``) that does not depend on the far domain
    (``far_share <= 1/4``) and a finite tail envelope.  This is a
    diagnostic, not a proof.
    """

    h: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    gap: np.ndarray
    tail: float
    slope: float
    far_share: float
    dri_like: bool

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in asdict(self).items()}


def _mesh(eta, h, s_cap, per_cell):
    K = int(math.ceil(s_cap / h - 1e-12))
    lo_all = np.arange(K, dtype=np.float64) * h
    infs = np.empty(K)
    sups = np.empty(K)
    step = max(1, 2_000_000 // (per_cell + 1))
    for a in range(0, K, step):
        lo = lo_all[a: a + step]
        hi = lo + h
        if hasattr(eta, "mesh_bounds"):
            i_, s_ = eta.mesh_bounds(lo, hi)
        else:
            frac = np.arange(1, per_cell + 1) / per_cell
            v = np.asarray(eta(lo[:, None] + h * frac[None, :]), dtype=np.float64)
            i_, s_ = v.min(1), v.max(1)
        infs[a: a + step] = i_
        sups[a: a + step] = s_
    return lo_all, infs, sups


def dri_mesh_check(eta, h_grid, s_cap, tail_envelope=None, per_cell=32):
    """Mesh sums ``L(h)``, ``U(h)`` of ``eta`` on ``(0, s_cap]``.

    Cell extrema come from ``eta.mesh_bounds`` when provided and otherwise
    from ``per_cell`` samples per cell (right endpoint included).  The tail
    beyond ``s_cap`` is bounded by ``int_{s_cap}^inf tail_envelope`` and
    widens both sums.
    """
    h_grid = np.sort(np.asarray(h_grid, dtype=np.float64))[::-1]
    tail = 0.0
    if tail_envelope is not None:
        tail, _ = integrate.quad(lambda x: float(tail_envelope(x)), s_cap, np.inf, limit=400)
        if not math.isfinite(tail):
            tail = math.inf
    lowers, uppers, far = [], [], 0.0
    for h in h_grid:
        lo, inf, sup = _mesh(eta, h, s_cap, per_cell)
        lowers.append(h * math.fsum(inf) - tail)
        uppers.append(h * math.fsum(sup) + tail)
        cell_gap = h * (sup - inf)
        tot = math.fsum(cell_gap)
        far = math.fsum(cell_gap[lo >= s_cap / 2]) / tot if tot > 0 else 0.0
    lower = np.array(lowers)
    upper = np.array(uppers)
    gap = upper - lower
    pos = gap > 0
    if pos.sum() >= 2 and np.all(np.isfinite(gap)):
        slope = float(np.polyfit(np.log(h_grid[pos]), np.log(gap[pos]), 1)[0])
    else:
        slope = math.inf if np.all(gap == 0) else math.nan
    dri = bool(math.isfinite(tail) and slope >= 0.5 and far <= 0.25)
    return DRIReport(h_grid, lower, upper, gap, tail, slope, far, dri)
