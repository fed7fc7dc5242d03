"""Shape densities on (0, 1) and their log-moment.

A shape is the law of a random fraction ``T`` in (0, 1).  The multiplicative
renewal analysis works with ``Y = log(1/T)``, whose mean ``mu`` (the
log-moment) sets the renewal rate.  Every shape carries a vectorized pdf, a
CDF (analytic where one is known, quadrature otherwise), and enough
information to draw samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

__all__ = [
    "InfiniteLogMomentError",
    "LogMomentReport",
    "NotSampleableError",
    "ShapeDensity",
    "beta_log_moment",
    "log_moment",
    "log_moment_report",
    "shape_from_config",
]

NORMALIZATION_TOL = 1e-8
LOG_MOMENT_CAP = 1e6
# Bands [2^(i-1), 2^i] of the Y axis scanned by the log-moment quadrature.
_MAX_BAND = 64


class InfiniteLogMomentError(ValueError):
    """The log-moment exceeds the configured cap with a non-decaying tail."""


class NotSampleableError(ValueError):
    """The shape has neither an inverse CDF nor a rejection bound."""


def _poly_cdf_coeffs(a, b):
    """Monomial coefficients of the Beta(a, b) CDF for integer a, b."""
    m = a + b - 1
    P = np.polynomial.Polynomial
    total = P([0.0])
    for j in range(a, m + 1):
        total = total + math.comb(m, j) * P([0.0, 1.0]) ** j * P([1.0, -1.0]) ** (m - j)
    return tuple(float(c) for c in total.coef)


@dataclass(frozen=True, eq=False)
class ShapeDensity:
    """Law of a fraction ``T`` on (0, 1).

    Parameters
    ----------
    name : str
        Label used in reports.
    pdf : callable or None
        Vectorized density on (0, 1).  ``None`` for lattice shapes, which
        have no density.
    cdf : callable, optional
        Analytic ``P(T <= t)``.  When omitted the CDF is computed by
        quadrature of ``pdf``.
    ppf : callable, optional
        Inverse CDF, used for sampling.
    pdf_bound : float, optional
        Upper bound of ``pdf`` enabling rejection sampling.
    lattice : bool
        Declared by the constructor; it is not detected.
    cdf_poly : tuple of float, optional
        Monomial coefficients when the CDF is a polynomial (enables the
        fast fixed-shape recursion).
    sampler : callable, optional
        ``sampler(rng, size)`` drawing ``T`` directly.
    mu_closed : float, optional
        Log-moment for shapes without a density.
    ypdf : callable, optional
        Analytic density of ``Y = log(1/T)``; avoids underflow of ``e^-y``.
    yppf : callable, optional
        Inverse of ``u -> P(Y >= y)``, sampling ``Y`` without forming ``T``.
    config : dict
        Constructor arguments, for round-tripping through configs.
    """

    name: str
    pdf: Optional[Callable]
    cdf: Optional[Callable] = None
    ppf: Optional[Callable] = None
    pdf_bound: Optional[float] = None
    lattice: bool = False
    cdf_poly: Optional[tuple] = None
    sampler: Optional[Callable] = None
    mu_closed: Optional[float] = None
    ypdf: Optional[Callable] = None
    yppf: Optional[Callable] = None
    config: dict = field(default_factory=dict)

    # constructors ----------------------------------------------------------
    @classmethod
    def uniform(cls):
        """``T ~ U(0, 1)``, so ``Y`` is standard exponential and ``mu = 1``."""
        return cls(
            "uniform",
            pdf=lambda t: np.ones_like(np.asarray(t, dtype=np.float64)),
            cdf=lambda t: np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0),
            ppf=lambda u: np.asarray(u, dtype=np.float64),
            pdf_bound=1.0,
            cdf_poly=(0.0, 1.0),
            config={"kind": "uniform"},
        )

    @classmethod
    def beta(cls, a, b):
        """Beta(a, b) shape.  Integer parameters give a polynomial CDF."""
        a, b = float(a), float(b)
        if not (a > 0 and b > 0):
            raise ValueError(f"beta parameters must be positive, got {(a, b)}")
        lognorm = special.betaln(a, b)

        def pdf(t):
            t = np.asarray(t, dtype=np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                v = np.exp((a - 1) * np.log(t) + (b - 1) * np.log1p(-t) - lognorm)
            return np.where((t > 0) & (t < 1), v, 0.0)

        def ypdf(y):
            y = np.asarray(y, dtype=np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                v = np.exp(-a * y + (b - 1) * np.log(-np.expm1(-y)) - lognorm)
            return np.where(y > 0, v, 0.0)

        poly = None
        if a.is_integer() and b.is_integer() and a + b - 1 <= 8:
            poly = _poly_cdf_coeffs(int(a), int(b))
        bound = None
        if a >= 1 and b >= 1:
            mode = 0.5 if a + b == 2 else (a - 1) / (a + b - 2)
            bound = float(pdf(np.array([mode]))[0]) if 0 < mode < 1 else float(max(a, b))
        return cls(
            f"beta({a:g},{b:g})",
            pdf=pdf,
            cdf=lambda t: special.betainc(a, b, np.clip(np.asarray(t, dtype=np.float64), 0, 1)),
            ppf=lambda u: special.betaincinv(a, b, np.asarray(u, dtype=np.float64)),
            pdf_bound=bound,
            cdf_poly=poly,
            ypdf=ypdf,
            config={"kind": "beta", "a": a, "b": b},
        )

    @classmethod
    def table(cls, grid, pdf_values):
        """Piecewise-linear density through ``(grid, pdf_values)``.

        The grid must run from 0 to 1; the values are renormalized so the
        interpolant integrates to one.
        """
        g = np.asarray(grid, dtype=np.float64)
        v = np.asarray(pdf_values, dtype=np.float64)
        if g.ndim != 1 or g.shape != v.shape or g.size < 2:
            raise ValueError("grid and pdf must be 1-D arrays of equal length >= 2")
        if g[0] != 0.0 or g[-1] != 1.0 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must increase strictly from 0 to 1")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("pdf values must be finite and non-negative")
        seg = 0.5 * (v[1:] + v[:-1]) * np.diff(g)
        z = math.fsum(seg)
        if not z > 0:
            raise ValueError("pdf table has zero mass")
        v = v / z
        cum = np.concatenate(([0.0], np.cumsum(seg / z)))
        slope = np.diff(v) / np.diff(g)

        def pdf(t):
            return np.interp(np.asarray(t, dtype=np.float64), g, v)

        def cdf(t):
            t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
            i = np.clip(np.searchsorted(g, t, side="right") - 1, 0, g.size - 2)
            d = t - g[i]
            return np.minimum(cum[i] + v[i] * d + 0.5 * slope[i] * d * d, 1.0)

        return cls(
            "table",
            pdf=pdf,
            cdf=cdf,
            pdf_bound=float(v.max()),
            config={"kind": "table", "grid": g.tolist(), "pdf": (v * z).tolist()},
        )

    @classmethod
    def lattice_geometric(cls, rho=0.5, q=0.5):
        """Lattice negative case: ``T = rho^G`` with ``G`` geometric on
        ``{1, 2, ...}``, ``P(G = j) = (1 - q) q^(j-1)``.

        ``Y = G log(1/rho)`` lives on a lattice, so the overshoot law is not
        defined and the shape has no density.
        """
        if not (0 < rho < 1 and 0 <= q < 1):
            raise ValueError("need 0 < rho < 1 and 0 <= q < 1")
        step = -math.log(rho)

        def cdf(t):
            t = np.asarray(t, dtype=np.float64)
            with np.errstate(divide="ignore"):
                j = np.ceil(np.log(t) / math.log(rho) - 1e-12)
            j = np.maximum(j, 1.0)
            return np.where(t >= 1, 1.0, np.where(t <= 0, 0.0, q ** (j - 1)))

        def sampler(rng, size):
            return rho ** rng.geometric(1 - q, size=size).astype(np.float64)

        return cls(
            f"lattice-geometric({rho:g},{q:g})",
            pdf=None,
            cdf=cdf,
            lattice=True,
            sampler=sampler,
            mu_closed=step / (1 - q),
            config={"kind": "lattice_geometric", "rho": rho, "q": q},
        )

    @classmethod
    def log_spike(cls, power=1.5, L_max=math.inf):
        """Density ``p(t) ~ t^-1 (1 + log(1/t))^-power`` on ``(e^-L_max, 1)``.

        ``Y`` has density proportional to ``(1 + y)^-power`` on ``[0, L_max]``,
        so the log-moment is infinite for ``power <= 2`` without truncation
        and merely huge with it.
        """
        if not power > 1:
            raise ValueError("power must exceed 1 for a normalizable density")
        if not L_max > 0:
            raise ValueError("L_max must be positive")
        e = 1.0 - power
        tail_cut = (1.0 + L_max) ** e if math.isfinite(L_max) else 0.0
        z = (1.0 - tail_cut) / (power - 1.0)

        def pdf(t):
            t = np.asarray(t, dtype=np.float64)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                y = -np.log(t)
                v = (1.0 + y) ** (-power) / (t * z)
            return np.where((y >= 0) & (y <= L_max) & (t > 0), v, 0.0)

        def ypdf(y):
            y = np.asarray(y, dtype=np.float64)
            return np.where((y >= 0) & (y <= L_max), (1.0 + y) ** (-power) / z, 0.0)

        def cdf(t):
            t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
            with np.errstate(divide="ignore"):
                y = -np.log(t)
            inside = ((1.0 + np.minimum(y, L_max)) ** e - tail_cut) / (1.0 - tail_cut)
            return np.where(y > L_max, 0.0, inside)

        def yppf(u):
            u = np.asarray(u, dtype=np.float64)
            return (u * (1.0 - tail_cut) + tail_cut) ** (1.0 / e) - 1.0

        def ppf(u):
            return np.exp(-yppf(u))

        return cls(
            f"log-spike({power:g},{L_max:g})",
            pdf=pdf,
            cdf=cdf,
            ppf=ppf,
            ypdf=ypdf,
            yppf=yppf,
            config={"kind": "log_spike", "power": power, "L_max": L_max},
        )

    # evaluation ------------------------------------------------------------
    def cdf_at(self, t):
        """``P(T <= t)``, by quadrature of the pdf when no CDF was supplied."""
        if self.cdf is not None:
            return self.cdf(t)
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        out = np.array([
            integrate.quad(self.pdf, 0.0, min(max(x, 0.0), 1.0),
                           epsabs=1e-12, epsrel=1e-12, limit=200)[0]
            for x in t
        ])
        return out

    @cached_property
    def mu(self):
        """Log-moment ``E[log(1/T)]`` (raises if infinite)."""
        return log_moment(self)

    @property
    def is_polynomial(self):
        return self.cdf_poly is not None

    def sample_T(self, rng, size):
        """Draw ``size`` values of ``T``.

        Raises
        ------
        NotSampleableError
            Without a sampler, inverse CDF or rejection bound.
        """
        if self.sampler is not None:
            return self.sampler(rng, size)
        if self.ppf is not None:
            # 1 - U lies in (0, 1], avoiding T = 0.
            return self.ppf(1.0 - rng.random(size))
        if self.pdf_bound is not None and self.pdf is not None:
            out = np.empty(size)
            filled = 0
            while filled < size:
                m = max(64, int(1.2 * (size - filled) * self.pdf_bound))
                t = 1.0 - rng.random(m)
                keep = t[rng.random(m) * self.pdf_bound < self.pdf(t)]
                take = min(keep.size, size - filled)
                out[filled: filled + take] = keep[:take]
                filled += take
            return out
        raise NotSampleableError(f"shape {self.name!r} has no sampler, ppf or pdf bound")

    def sample_Y(self, rng, size):
        """Draw ``Y = log(1/T)``."""
        if self.yppf is not None:
            return self.yppf(1.0 - rng.random(size))
        return -np.log(self.sample_T(rng, size))

    def y_density(self, y):
        """Density of ``Y`` at ``y >= 0``: ``p(e^-y) e^-y``."""
        if self.ypdf is not None:
            return self.ypdf(y)
        y = np.asarray(y, dtype=np.float64)
        t = np.exp(-y)
        with np.errstate(invalid="ignore", over="ignore"):
            v = self.pdf(t) * t
        return np.where(t > 0, v, 0.0)

    def to_dict(self):
        return dict(self.config)


def shape_from_config(cfg):
    """Build a shape from ``{"kind": ...}`` configuration.

    Supported kinds: ``uniform``, ``beta`` (keys ``a``, ``b``), ``table``
    (keys ``grid``, ``pdf``), ``lattice_geometric`` (``rho``, ``q``) and
    ``log_spike`` (``power``, ``L_max``).
    """
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ValueError("shape config must be an object with a 'kind' key")
    kind = cfg["kind"]
    try:
        if kind == "uniform":
            return ShapeDensity.uniform()
        if kind == "beta":
            return ShapeDensity.beta(cfg["a"], cfg["b"])
        if kind == "table":
            return ShapeDensity.table(cfg["grid"], cfg["pdf"])
        if kind == "lattice_geometric":
            return ShapeDensity.lattice_geometric(cfg.get("rho", 0.5), cfg.get("q", 0.5))
        if kind == "log_spike":
            return ShapeDensity.log_spike(cfg.get("power", 1.5), cfg.get("L_max", math.inf))
    except KeyError as exc:
        raise ValueError(f"shape config for {kind!r} is missing {exc.args[0]!r}") from None
    raise ValueError(f"unknown shape kind {kind!r}")


def beta_log_moment(a, b):
    """Closed form ``E[log(1/T)] = psi(a + b) - psi(a)`` for Beta(a, b)."""
    return float(special.digamma(a + b) - special.digamma(a))


@dataclass
class LogMomentReport:
    """Log-moment with its band decomposition.

    ``bands`` are the edges ``0, 1, 2, 4, ...`` of the ``Y`` axis;
    ``contributions[i]`` is the part of ``mu`` from band ``i`` and ``masses``
    its probability.  ``tail_exponent`` is the fitted growth rate ``s`` of the
    contributions (``c_i ~ 2^(s i)``) over the last significant bands; a value
    above ``-1/4`` marks the shape as near-divergent.
    """

    mu: float
    mass: float
    bands: np.ndarray
    contributions: np.ndarray
    masses: np.ndarray
    tail_exponent: float
    near_divergent: bool
    finite: bool


def _band_integrals(shape):
    edges = [0.0] + [2.0 ** i for i in range(_MAX_BAND + 1)]
    contrib, mass = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        c = integrate.quad(lambda y: y * shape.y_density(y), lo, hi,
                           epsabs=1e-13, epsrel=1e-12, limit=200)[0]
        m = integrate.quad(shape.y_density, lo, hi, epsabs=1e-13, epsrel=1e-12,
                           limit=200)[0]
        contrib.append(c)
        mass.append(m)
        if hi >= 64 and m < 1e-17 and c < 1e-15:
            break
    return np.array(edges[: len(contrib) + 1]), np.array(contrib), np.array(mass)


def log_moment_report(shape, cap=LOG_MOMENT_CAP):
    """Band-wise quadrature of ``mu = int_0^inf y f_Y(y) dy``.

    The substitution ``t = e^-y`` turns endpoint singularities at ``t = 0``
    into a decaying tail, which is integrated band by band on dyadic bands.

    Raises
    ------
    ValueError
        If the density does not integrate to one within ``1e-8``.
    """
    if shape.pdf is None:
        mu = float(shape.mu_closed)
        return LogMomentReport(mu, 1.0, np.array([]), np.array([]), np.array([]),
                               -math.inf, False, math.isfinite(mu))
    edges, contrib, masses = _band_integrals(shape)
    mass = math.fsum(masses)
    if abs(mass - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"shape {shape.name!r} integrates to {mass!r}, not 1")
    mu = math.fsum(contrib)
    sig = np.nonzero(contrib > 1e-12 * max(mu, 1e-300))[0]
    tail = sig[-6:] if sig.size >= 3 else sig
    if tail.size >= 3:
        s = float(np.polyfit(tail, np.log2(contrib[tail]), 1)[0])
    else:
        s = -math.inf
    near = s > -0.25
    finite = mu <= cap or not near
    return LogMomentReport(mu, mass, edges, contrib, masses, s, near, finite)


def log_moment(shape, cap=LOG_MOMENT_CAP):
    """``mu = int_0^1 p(t) log(1/t) dt``.

    Raises
    ------
    InfiniteLogMomentError
        If the value exceeds ``cap`` and the band contributions do not decay.
    """
    rep = log_moment_report(shape, cap)
    if not rep.finite:
        raise InfiniteLogMomentError(
            f"log-moment of {shape.name!r} exceeds {cap:g} with a non-decaying tail "
            f"(band growth exponent {rep.tail_exponent:.3f})"
        )
    return rep.mu
