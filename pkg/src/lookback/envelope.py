"""Envelope parameters and the polylogarithmic floor/ceiling schedules.

A lookback weight p_n is sandwiched between a floor f(n)/n and a ceiling
c(n)/n.  The same family is described by the pair of schedules

    eps_n   = A (log n)^(-alpha)
    delta_n = B (log n)^(-beta)

where eps_n is the uniform share of mass and delta_n the fraction of indices
receiving the boosted weight.  The two descriptions are related by
``reparametrize``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ConstantsLedger",
    "EnvelopeParams",
    "FloorCeiling",
    "block_size",
    "load_params",
    "min_valid_index",
    "reparametrize",
    "schedule_at",
]

# Upper bound for both schedules; every bound in the dynamics assumes it.
SCHEDULE_CAP = 0.5


def reparametrize(f_n, c_n):
    """Convert a floor/ceiling pair into ``(eps, delta)``.

    Parameters
    ----------
    f_n : float
        Floor value, ``0 < f_n <= 1``.
    c_n : float
        Ceiling value, ``c_n >= 1``.

    Returns
    -------
    eps, delta : float
        ``eps = f_n`` and ``delta = (1 - f_n) / (c_n - f_n)``.  When
        ``c_n == f_n`` (which forces ``f_n = c_n = 1``) the only admissible
        measure is uniform and ``delta = 1`` is returned.

    Notes
    -----
    Assigning ``c_n/n`` to ``delta*n`` indices and ``f_n/n`` to the rest gives
    total mass ``c_n*delta + f_n*(1 - delta) = 1``.
    """
    if not (f_n > 0):
        raise ValueError(f"floor must be positive, got {f_n!r}")
    if f_n > 1:
        raise ValueError(f"floor must be at most 1, got {f_n!r}")
    if c_n < f_n:
        raise ValueError(f"ceiling {c_n!r} is below floor {f_n!r}")
    if c_n < 1:
        raise ValueError(f"ceiling must be at least 1, got {c_n!r}")
    if c_n == f_n:
        return f_n, type(f_n)(1) if not isinstance(f_n, float) else 1.0
    return f_n, (1 - f_n) / (c_n - f_n)


def block_size(n, delta):
    """Top/bottom block size ``max(1, floor(delta * n))``."""
    return max(1, math.floor(delta * n))


def _log_schedule(amp, expo, n):
    return amp * math.log(n) ** (-expo) if expo else float(amp)


@dataclass(frozen=True)
class EnvelopeParams:
    """The four envelope constants and the first index where they are valid.

    Parameters
    ----------
    A, alpha : float
        Amplitude and log-exponent of the floor schedule ``eps_n``.
    B, beta : float
        Amplitude and log-exponent of the block-fraction schedule ``delta_n``.
    n_min : int, optional
        First valid index.  Computed with :func:`min_valid_index` when omitted;
        a supplied value is checked against the same criteria.
    """

    A: float
    alpha: float
    B: float
    beta: float
    n_min: int = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        for name in ("A", "B"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v!r}")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be non-negative and finite, got {v!r}")
        if self.alpha == 0 and self.A > SCHEDULE_CAP:
            raise ValueError("constant floor schedule exceeds 1/2 for every n")
        if self.beta == 0 and self.B > SCHEDULE_CAP:
            raise ValueError("constant block schedule exceeds 1/2 for every n")
        computed = min_valid_index(self)
        if self.n_min is None:
            object.__setattr__(self, "n_min", computed)
        else:
            if int(self.n_min) != self.n_min or self.n_min < computed:
                raise ValueError(
                    f"n_min={self.n_min!r} is below the first valid index {computed}"
                )
            object.__setattr__(self, "n_min", int(self.n_min))

    # schedules -------------------------------------------------------------
    def eps(self, n):
        """Floor share ``A (log n)^-alpha`` (no range check)."""
        return _log_schedule(self.A, self.alpha, n)

    def delta(self, n):
        """Block fraction ``B (log n)^-beta`` (no range check)."""
        return _log_schedule(self.B, self.beta, n)

    def eps_array(self, n):
        n = np.asarray(n, dtype=np.float64)
        return self.A * np.log(n) ** (-self.alpha)

    def delta_array(self, n):
        n = np.asarray(n, dtype=np.float64)
        return self.B * np.log(n) ** (-self.beta)

    def floor_ceiling(self):
        """Raw-envelope view ``f(n) = eps_n`` and the matching ceiling.

        The ceiling solving the mixture identity is
        ``c(n) = f(n) + (1 - f(n)) / delta_n``.
        """
        return FloorCeiling.from_params(self)

    def stage_floor(self, upto=10**7):
        """First index beyond which ``n eps_n^2 delta_n^3`` increases.

        Only the convergence stage map needs this monotonicity, so it is not
        folded into ``n_min``.
        """
        lo = max(3.0, math.exp(2 * self.alpha + 3 * self.beta))
        return max(self.n_min, math.ceil(lo)) if lo < upto else None

    def to_dict(self):
        return {"A": self.A, "alpha": self.alpha, "B": self.B, "beta": self.beta,
                "n_min": self.n_min}

    @classmethod
    def from_dict(cls, cfg):
        try:
            return cls(float(cfg["A"]), float(cfg["alpha"]), float(cfg["B"]),
                       float(cfg["beta"]), cfg.get("n_min"))
        except KeyError as exc:
            raise ValueError(f"envelope config is missing key {exc.args[0]!r}") from None


def schedule_at(params, n):
    """Return ``(eps_n, delta_n)`` for ``n >= params.n_min``.

    Raises
    ------
    ValueError
        If ``n`` precedes the valid range.
    """
    if n < params.n_min:
        raise ValueError(f"index {n} precedes the first valid index {params.n_min}")
    return params.eps(n), params.delta(n)


def _ok_log(A, alpha, B, beta, L):
    """Range and ``eps*delta*n`` growth checks at ``n = exp(L)``."""
    if A * L ** -alpha > SCHEDULE_CAP or B * L ** -beta > SCHEDULE_CAP:
        return False
    # log(eps delta n) increments by log1p(1/n) - (alpha+beta) log(log(n+1)/log n);
    # log1p keeps both terms accurate for huge n.
    step = math.log1p(math.exp(-L))
    return step - (alpha + beta) * math.log1p(step / L) > 0


def _ok_at(A, alpha, B, beta, n):
    return _ok_log(A, alpha, B, beta, math.log(n))


def min_valid_index(params) -> int:
    """Smallest ``n >= 3`` where both schedules are at most 1/2 and
    ``eps_n delta_n n`` is increasing from ``n`` on.

    Both conditions are monotone in ``n`` (the schedules decrease and the log
    derivative ``1/n - (alpha+beta)/(n log n)`` changes sign once), so a
    doubling search followed by bisection finds the threshold.  The result is
    then confirmed on a log-spaced sample of ``[n, n^2]``.
    """
    A, alpha, B, beta = params.A, params.alpha, params.B, params.beta
    if (alpha == 0 and A > SCHEDULE_CAP) or (beta == 0 and B > SCHEDULE_CAP):
        raise ValueError("schedule is constant and exceeds 1/2")
    lo = 3
    if _ok_at(A, alpha, B, beta, lo):
        n = lo
    else:
        hi = 4
        while not _ok_at(A, alpha, B, beta, hi):
            lo = hi
            hi *= 2
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if _ok_at(A, alpha, B, beta, mid):
                hi = mid
            else:
                lo = mid
        n = hi
    # Guard against non-monotone corner cases: sample [n, n^2].
    L = math.log(n)
    for Lm in np.linspace(L, 2 * L, 200):
        if not _ok_log(A, alpha, B, beta, float(Lm)):
            raise RuntimeError(f"envelope check failed at sampled index exp({Lm})")
    return int(n)


@dataclass(frozen=True)
class FloorCeiling:
    """Raw floor/ceiling view ``f(n) = A (log n)^-alpha``, ``c(n) = B' (log n)^beta``.

    The ceiling amplitude ``B_ceiling`` is independent of the block amplitude
    in :class:`EnvelopeParams`.
    """

    A: float
    alpha: float
    B_ceiling: float
    beta: float
    n_min: int = 3

    def f(self, n):
        return self.A * math.log(n) ** (-self.alpha)

    def c(self, n):
        return self.B_ceiling * math.log(n) ** self.beta

    def check(self, n):
        """True when ``0 < f(n) <= 1 <= c(n)``."""
        return 0 < self.f(n) <= 1 <= self.c(n)

    def schedules(self, n):
        """``(eps_n, delta_n)`` obtained by reparametrizing at ``n``."""
        return reparametrize(self.f(n), self.c(n))

    @classmethod
    def from_params(cls, params):
        # Leading-order ceiling: c(n) ~ 1/delta_n = (log n)^beta / B.
        return cls(params.A, params.alpha, 1.0 / params.B, params.beta, params.n_min)


@dataclass(frozen=True)
class ConstantsLedger:
    """Absolute constants of the stage constructions.

    Attributes
    ----------
    K : float
        Stage-length multiplier of the convergence schedule (``K >= 1``).
    C_big : float
        Erosion constant of the divergence construction.  Zero disables
        erosion, which is useful as a control.
    c_small : float
        Contraction constant of the convergence schedule, in ``(0, 1]``.
    """

    K: float = 8.0
    C_big: float = 8.0
    c_small: float = 1.0 / 64.0

    def __post_init__(self):
        if not self.K >= 1:
            raise ValueError(f"K must be >= 1, got {self.K!r}")
        if not self.C_big >= 0:
            raise ValueError(f"C_big must be >= 0, got {self.C_big!r}")
        if not 0 < self.c_small <= 1:
            raise ValueError(f"c_small must lie in (0, 1], got {self.c_small!r}")

    def to_dict(self):
        return {"K": self.K, "C_big": self.C_big, "c_small": self.c_small}

    @classmethod
    def from_dict(cls, cfg):
        return cls(**{k: float(v) for k, v in cfg.items() if k in ("K", "C_big", "c_small")})


def load_params(source) -> EnvelopeParams:
    """Load :class:`EnvelopeParams` from a JSON file, a JSON string or a dict.

    The block may be nested under an ``"envelope"`` key.
    """
    if isinstance(source, dict):
        cfg = source
    else:
        text = str(source)
        p = Path(text)
        if not text.lstrip().startswith("{") and p.exists():
            text = p.read_text()
        cfg = json.loads(text)
    if "envelope" in cfg:
        cfg = cfg["envelope"]
    return EnvelopeParams.from_dict(cfg)
