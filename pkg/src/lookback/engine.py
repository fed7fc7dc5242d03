"""Forward lookback-averaging process.

The generic recursion is ``a_{n+1} = sum_j p_n(j) a_j``.  Under an envelope
``f(n)/n <= p_n(j) <= c(n)/n`` every admissible next term lies in

    eps*mean + (1 - eps) * [bottom-block mean, top-block mean]

with blocks of size ``m_n = max(1, floor(delta_n n))``.  This module runs the
generic recursion, the two extremal rules, any point of the interval (chosen
by a coefficient ``lam``) and converts between ``lam`` and explicit weights.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numba import njit

from .envelope import SCHEDULE_CAP, block_size
from .orderstats import (
    ExactAccumulator,
    OrderStatAccumulator,
    treap_insert,
    treap_sum_bottom,
    treap_sum_top,
)

__all__ = [
    "DEFAULT_N_MAX",
    "InvariantViolation",
    "LambdaSchedule",
    "ProcessTrace",
    "TraceCapacityError",
    "WeightPolicy",
    "affine_map",
    "default_n_max",
    "infer_lambda",
    "interval_endpoints",
    "load_init",
    "reconstruct_weights",
    "run_schedule",
    "step_extremal_max",
    "step_extremal_min",
    "step_general",
    "step_interval",
]

DEFAULT_N_MAX = 10**7
WEIGHT_SUM_TOL = 1e-9


class TraceCapacityError(RuntimeError):
    """Raised when a trace would grow beyond its ``n_max`` cap."""


class InvariantViolation(RuntimeError):
    """Raised when a checked invariant of the dynamics fails."""


def default_n_max():
    """Trace cap from ``LOOKBACK_N_MAX`` or :data:`DEFAULT_N_MAX`."""
    env = os.environ.get("LOOKBACK_N_MAX")
    if env:
        return int(float(env))
    return DEFAULT_N_MAX


class ProcessTrace:
    """Realized sequence ``a_1..a_N`` with running aggregates.

    Parameters
    ----------
    init : array_like
        Initial terms ``a_1..a_k``.  A 2-D array gives vector-valued states
        (only :func:`step_general` applies to those).
    exact : bool, optional
        Store values as :class:`fractions.Fraction` and use an exact
        accumulator.  Intended for short traces.
    n_max : int, optional
        Hard cap on the trace length (default from :func:`default_n_max`).
    seed : int, optional
        Seed of the per-trace random generator (also seeds the accumulator).
    debug : bool, optional
        Enable periodic accumulator audits.
    """

    def __init__(self, init, *, exact=False, n_max=None, seed=0, debug=False):
        self.exact = bool(exact)
        self.n_max = int(n_max) if n_max is not None else default_n_max()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        if self.exact:
            vals = [Fraction(x) for x in init]
            if not vals:
                raise ValueError("initialization must be non-empty")
            self.dim = 1
            self._vals = vals
            self.accumulator = ExactAccumulator()
            self.accumulator.extend(vals)
            self._sum = sum(vals, Fraction(0))
            self._comp = Fraction(0)
            self.k = len(vals)
            self._n = len(vals)
        else:
            arr = np.asarray(init, dtype=np.float64)
            if arr.ndim not in (1, 2) or arr.shape[0] == 0:
                raise ValueError("initialization must be a non-empty 1-D or 2-D array")
            if not np.all(np.isfinite(arr)):
                raise ValueError("initialization contains non-finite values")
            self.dim = 1 if arr.ndim == 1 else arr.shape[1]
            self.k = arr.shape[0]
            if self.k > self.n_max:
                raise TraceCapacityError(f"initialization longer than n_max={self.n_max}")
            cap = max(64, 2 * self.k)
            shape = (cap,) if arr.ndim == 1 else (cap, self.dim)
            self._vals = np.empty(shape, dtype=np.float64)
            self._vals[: self.k] = arr
            self._n = self.k
            self._sum = 0.0
            self._comp = 0.0
            if arr.ndim == 1:
                self.accumulator = OrderStatAccumulator(cap, seed=seed, debug=debug)
                self.accumulator.extend(arr)
                for x in arr.tolist():
                    self._add(x)
            else:
                self.accumulator = None
                self._vec_sum = arr.sum(axis=0)
        self.init_min = min(self._vals[: self.k]) if self.exact else None
        self.init_max = max(self._vals[: self.k]) if self.exact else None
        if not self.exact and self.dim == 1:
            self.init_min = float(np.min(arr))
            self.init_max = float(np.max(arr))

    # bookkeeping -----------------------------------------------------------
    def _add(self, x):
        # Neumaier compensated running sum.
        t = self._sum + x
        if abs(self._sum) >= abs(x):
            self._comp += (self._sum - t) + x
        else:
            self._comp += (x - t) + self._sum
        self._sum = t

    def _reserve(self, size):
        if self.exact:
            return
        cap = self._vals.shape[0]
        if size <= cap:
            return
        new = cap
        while new < size:
            new *= 2
        vals = np.empty((new,) + self._vals.shape[1:], dtype=np.float64)
        vals[: self._n] = self._vals[: self._n]
        self._vals = vals
        if self.accumulator is not None:
            self.accumulator.reserve(new)

    def _check_room(self, extra=1):
        if self._n + extra > self.n_max:
            raise TraceCapacityError(
                f"trace would exceed n_max={self.n_max} (currently {self._n} terms)"
            )

    def append(self, x):
        """Append a term computed elsewhere and return it."""
        self._check_room()
        if self.exact:
            x = Fraction(x)
            self._vals.append(x)
            self.accumulator.insert(x)
            self._sum += x
        elif self.dim == 1:
            x = float(x)
            if not math.isfinite(x):
                raise InvariantViolation(f"non-finite term at n={self._n + 1}")
            self._reserve(self._n + 1)
            self._vals[self._n] = x
            self.accumulator.insert(x)
            self._add(x)
        else:
            x = np.asarray(x, dtype=np.float64)
            self._reserve(self._n + 1)
            self._vals[self._n] = x
            self._vec_sum = self._vec_sum + x
        self._n += 1
        return x

    def extend(self, xs):
        """Append a block of terms computed elsewhere (scalar float traces use
        a bulk accumulator insert)."""
        if self.exact or self.dim > 1:
            for x in xs:
                self.append(x)
            return
        xs = np.asarray(xs, dtype=np.float64).ravel()
        self._check_room(xs.shape[0])
        if not np.all(np.isfinite(xs)):
            bad = int(np.argmin(np.isfinite(xs)))
            raise InvariantViolation(f"non-finite term at n={self._n + bad + 1}")
        self._reserve(self._n + xs.shape[0])
        self._vals[self._n: self._n + xs.shape[0]] = xs
        self.accumulator.extend(xs)
        for x in xs.tolist():
            self._add(x)
        self._n += xs.shape[0]

    # views -----------------------------------------------------------------
    @property
    def n(self):
        """Current length of the trace."""
        return self._n

    def __len__(self):
        return self._n

    @property
    def values(self):
        """The terms ``a_1..a_n`` (a view for float traces, a list if exact)."""
        if self.exact:
            return list(self._vals)
        return self._vals[: self._n]

    def value(self, i):
        """Term ``a_i`` with 1-based index."""
        return self._vals[i - 1]

    @property
    def total(self):
        if self.exact:
            return self._sum
        if self.dim > 1:
            return self._vec_sum.copy()
        return self._sum + self._comp

    @property
    def mean(self):
        """Running mean ``ā_n``."""
        return self.total / self._n

    running_mean = mean

    def top_mean(self, m):
        return self.accumulator.sum_top(m) / m

    def bottom_mean(self, m):
        return self.accumulator.sum_bottom(m) / m

    def running_means(self):
        """Array of ``ā_1..ā_n``."""
        if self.exact:
            out, s = [], Fraction(0)
            for i, x in enumerate(self._vals, 1):
                s += x
                out.append(s / i)
            return out
        idx = np.arange(1, self._n + 1, dtype=np.float64)
        cs = np.cumsum(self.values, axis=0)
        return cs / (idx if self.dim == 1 else idx[:, None])

    def copy(self):
        """Independent copy (accumulator rebuilt from the stored terms)."""
        tr = ProcessTrace(self.values[: self.k], exact=self.exact, n_max=self.n_max,
                          seed=self.seed)
        tr.extend(self.values[self.k:])
        return tr

    # export ----------------------------------------------------------------
    def to_csv(self, path=None, header_lines=()):
        """Write ``n, a_n, mean_n`` rows (``%.17g``); returns the text if no path."""
        if self.dim != 1:
            raise ValueError("CSV export supports scalar traces only")
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        buf.write("n,a_n,mean_n\n")
        means = self.running_means()
        for i, (x, m) in enumerate(zip(self.values, means), 1):
            buf.write(f"{i},{float(x):.17g},{float(m):.17g}\n")
        text = buf.getvalue()
        if path is None:
            return text
        Path(path).write_text(text)
        return text


def load_init(source):
    """Read an initialization from a CSV file, a JSON file or inline JSON.

    CSV files may contain ``#`` comment lines and an optional header; the
    ``a_n`` (or ``a``) column is used, else the last column.
    """
    if isinstance(source, (list, tuple, np.ndarray)):
        return np.asarray(source, dtype=np.float64)
    text = str(source).strip()
    if text.startswith("["):
        return np.asarray(json.loads(text), dtype=np.float64)
    path = Path(text)
    if not path.exists():
        raise ValueError(f"initialization source not found: {text!r}")
    body = path.read_text()
    if path.suffix.lower() == ".json" or body.lstrip().startswith("["):
        data = json.loads(body)
        if isinstance(data, dict):
            data = data.get("init", data.get("values"))
        return np.asarray(data, dtype=np.float64)
    rows = [r for r in csv.reader(line for line in body.splitlines()
                                  if line.strip() and not line.lstrip().startswith("#"))]
    if not rows:
        raise ValueError(f"no data rows in {text!r}")
    col = -1
    try:
        float(rows[0][col])
    except ValueError:
        head = [h.strip() for h in rows[0]]
        for name in ("a_n", "a"):
            if name in head:
                col = head.index(name)
                break
        rows = rows[1:]
    return np.asarray([float(r[col]) for r in rows], dtype=np.float64)


@dataclass
class WeightPolicy:
    """Map ``(n, trace) -> p_n`` with optional envelope metadata.

    Attributes
    ----------
    fn : callable
        Returns a length-``n`` probability vector.
    envelope : tuple of float, optional
        ``(f_n, c_n)`` the policy claims to satisfy, for reporting.
    name : str
    """

    fn: Callable
    envelope: Optional[tuple] = None
    name: str = "policy"

    def __call__(self, n, trace):
        return self.fn(n, trace)

    @classmethod
    def uniform(cls):
        return cls(lambda n, tr: np.full(n, 1.0 / n), (1.0, 1.0), "uniform")

    @classmethod
    def point_mass(cls, j):
        def fn(n, tr):
            p = np.zeros(n)
            p[j - 1] = 1.0
            return p

        return cls(fn, None, f"point-mass-{j}")


@dataclass
class LambdaSchedule:
    """Map ``n -> lam_n`` in ``[0, 1]``; the value is range-checked on use."""

    fn: Callable
    name: str = "lambda"

    def __call__(self, n):
        lam = self.fn(n)
        if not 0 <= lam <= 1:
            raise ValueError(f"lambda schedule returned {lam!r} at n={n}")
        return lam

    @classmethod
    def constant(cls, lam):
        return cls(lambda n: lam, f"constant-{lam}")

    @classmethod
    def iid_uniform(cls, seed=0):
        rng = np.random.default_rng(seed)
        return cls(lambda n: float(rng.random()), f"iid-uniform-{seed}")


# ---------------------------------------------------------------------------
# single steps

def _check_schedule(eps, delta):
    if not (0 < eps <= SCHEDULE_CAP):
        raise ValueError(f"eps={eps!r} outside (0, 1/2]")
    if not (0 < delta <= SCHEDULE_CAP):
        raise ValueError(f"delta={delta!r} outside (0, 1/2]")


def _coerce(trace, *xs):
    if trace.exact:
        return tuple(Fraction(x) for x in xs)
    return tuple(float(x) for x in xs)


def _require_scalar(trace):
    if trace.dim != 1:
        raise ValueError("extremal and interval dynamics need scalar states")


def step_general(trace, policy):
    """Append ``a_{n+1} = sum_j p_n(j) a_j`` for the policy's weights.

    Vector-valued states are averaged coordinatewise.

    Raises
    ------
    ValueError
        If the weights have the wrong length, a negative entry, or do not sum
        to one within ``1e-9``.
    """
    n = trace.n
    p = policy(n, trace)
    if trace.exact:
        p = [Fraction(x) for x in p]
        if len(p) != n or any(x < 0 for x in p) or abs(sum(p) - 1) > WEIGHT_SUM_TOL:
            raise ValueError("policy returned an invalid probability vector")
        return trace.append(sum((w * a for w, a in zip(p, trace.values)), Fraction(0)))
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (n,):
        raise ValueError(f"policy returned shape {p.shape}, expected ({n},)")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("policy returned negative or non-finite weights")
    s = math.fsum(p)
    if abs(s - 1) > WEIGHT_SUM_TOL:
        raise ValueError(f"policy weights sum to {s!r}, not 1")
    return trace.append(p @ trace.values)


def interval_endpoints(trace, eps, delta):
    """Lower and upper admissible next terms ``(lo, hi)`` at the current n."""
    _require_scalar(trace)
    eps, delta = _coerce(trace, eps, delta)
    n = trace.n
    m = block_size(n, delta)
    mean = trace.mean
    lo = eps * mean + (1 - eps) * trace.bottom_mean(m)
    hi = eps * mean + (1 - eps) * trace.top_mean(m)
    return lo, hi


def step_extremal_max(trace, eps, delta):
    """Append ``eps*mean + (1-eps)*(mean of the top m_n terms)``."""
    _require_scalar(trace)
    _check_schedule(eps, delta)
    eps, delta = _coerce(trace, eps, delta)
    m = block_size(trace.n, delta)
    return trace.append(eps * trace.mean + (1 - eps) * trace.top_mean(m))


def step_extremal_min(trace, eps, delta):
    """Append ``eps*mean + (1-eps)*(mean of the bottom m_n terms)``."""
    _require_scalar(trace)
    _check_schedule(eps, delta)
    eps, delta = _coerce(trace, eps, delta)
    m = block_size(trace.n, delta)
    return trace.append(eps * trace.mean + (1 - eps) * trace.bottom_mean(m))


def step_interval(trace, eps, delta, lam):
    """Append the point of the admissible interval with coefficient ``lam``.

    ``lam = 1`` reproduces :func:`step_extremal_max` and ``lam = 0``
    reproduces :func:`step_extremal_min` exactly.
    """
    _require_scalar(trace)
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda={lam!r} outside [0, 1]")
    _check_schedule(eps, delta)
    eps, delta, lam = _coerce(trace, eps, delta, lam)
    m = block_size(trace.n, delta)
    top = trace.top_mean(m) if lam > 0 else 0
    bot = trace.bottom_mean(m) if lam < 1 else 0
    return trace.append(eps * trace.mean + (1 - eps) * (lam * top + (1 - lam) * bot))


def reconstruct_weights(trace, eps, delta, lam, f, c):
    """Explicit weights ``p_n`` whose average equals :func:`step_interval`.

    The base measure is ``f/n`` everywhere plus ``(c-f)/n`` split as ``lam``
    on the top block and ``1-lam`` on the bottom block.  Flooring the block
    size leaves a residual mass ``r = 1 - f - m(c-f)/n`` in ``[0, (c-f)/n)``;
    it is split between the largest and smallest term so that the mean of the
    weights stays equal to the interval point.  Only those two indices can
    exceed the ``c/n`` ceiling.

    Returns
    -------
    numpy.ndarray
        Probability vector of length ``n`` (float traces only).

    Raises
    ------
    ValueError
        If the top and bottom blocks overlap (``2 m_n > n``) or ``(f, c)`` is
        inconsistent with ``(eps, delta)``.
    """
    _require_scalar(trace)
    if trace.exact:
        raise ValueError("weight reconstruction works on float traces")
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda={lam!r} outside [0, 1]")
    n = trace.n
    if c == f:
        return np.full(n, 1.0 / n)
    if abs(f - eps) > 1e-12 or abs((1 - f) / (c - f) - delta) > 1e-12:
        raise ValueError("(f, c) does not reparametrize to (eps, delta)")
    m = block_size(n, delta)
    if 2 * m > n:
        raise ValueError(
            f"top and bottom blocks overlap (2*{m} > {n}); the interval form "
            "assumes disjoint blocks, which needs delta_n <= 1/2 and n large enough"
        )
    a = trace.values
    order = np.argsort(a, kind="stable")  # ascending by (value, insertion)
    bottom, top = order[:m], order[n - m:]
    u = (c - f) / n
    p = np.full(n, f / n)
    p[top] += lam * u
    p[bottom] += (1 - lam) * u
    r = 1.0 - f - m * u
    if r < 0:
        if r < -1e-12:
            raise ValueError("block mass exceeds the available budget")
        r = 0.0
    i_max, i_min = order[-1], order[0]
    a_max, a_min = a[i_max], a[i_min]
    if a_max > a_min:
        v = lam * a[top].mean() + (1 - lam) * a[bottom].mean()
        theta = min(1.0, max(0.0, (v - a_min) / (a_max - a_min)))
    else:
        theta = 1.0 - lam
    p[i_max] += r * theta
    p[i_min] += r * (1 - theta)
    return p


def infer_lambda(trace, a_next, eps, delta, tol=1e-9):
    """Coefficient ``lam`` placing ``a_next`` in the admissible interval.

    Returns 0 when the two block means coincide.

    Raises
    ------
    ValueError
        If ``a_next`` lies outside the interval by more than ``tol``.
    """
    lo, hi = interval_endpoints(trace, eps, delta)
    if a_next < lo - tol or a_next > hi + tol:
        raise ValueError(f"a_next={a_next!r} outside admissible interval [{lo!r}, {hi!r}]")
    width = hi - lo
    if width == 0:
        return 0.0
    lam = (a_next - lo) / width
    return min(1.0, max(0.0, float(lam)))


def affine_map(trace, scale, shift):
    """New trace with terms ``scale*a + shift`` (same ``k`` and settings)."""
    if scale == 0:
        raise ValueError("scale must be non-zero")
    vals = trace.values
    if trace.exact:
        scale, shift = Fraction(scale), Fraction(shift)
        mapped = [scale * x + shift for x in vals]
    else:
        mapped = scale * np.asarray(vals) + shift
    out = ProcessTrace(mapped[: trace.k], exact=trace.exact, n_max=trace.n_max,
                       seed=trace.seed)
    out.extend(mapped[trace.k:])
    return out


# ---------------------------------------------------------------------------
# batched stepping

@njit(cache=True)
def _run_kernel(F, I, stack, root, vals, n, s, comp, eps, delta, lam,
                chk_eps, chk_delta, start):
    """Advance the interval dynamics for steps ``start..len(eps)-1``.

    Returns ``(root, n, s, comp, steps_done, status, max_violation)`` where
    ``status`` is 0 on completion and -2 when the treap path stack is full.
    ``max_violation`` is the largest distance of a new term outside the
    admissible interval of the check schedules (0 if they are empty).
    """
    check = chk_eps.shape[0] > 0
    viol = 0.0
    for i in range(start, eps.shape[0]):
        mean = (s + comp) / n
        m = int(math.floor(delta[i] * n))
        if m < 1:
            m = 1
        lm = lam[i]
        top = 0.0
        bot = 0.0
        if lm > 0.0:
            top = treap_sum_top(F, I, root, m)[0] / m
        if lm < 1.0:
            bot = treap_sum_bottom(F, I, root, m)[0] / m
        x = eps[i] * mean + (1.0 - eps[i]) * (lm * top + (1.0 - lm) * bot)
        if check:
            mc = int(math.floor(chk_delta[i] * n))
            if mc < 1:
                mc = 1
            tc = treap_sum_top(F, I, root, mc)[0] / mc
            bc = treap_sum_bottom(F, I, root, mc)[0] / mc
            lo = chk_eps[i] * mean + (1.0 - chk_eps[i]) * bc
            hi = chk_eps[i] * mean + (1.0 - chk_eps[i]) * tc
            d = max(lo - x, x - hi)
            if d > viol:
                viol = d
        new_root, _c = treap_insert(F, I, stack, root, n, x)
        if new_root == -2:
            return root, n, s, comp, i, -2, viol
        root = new_root
        vals[n] = x
        t = s + x
        if abs(s) >= abs(x):
            comp += (s - t) + x
        else:
            comp += (x - t) + s
        s = t
        n += 1
    return root, n, s, comp, eps.shape[0], 0, viol


def run_schedule(trace, eps, delta, lam, check_eps=None, check_delta=None):
    """Advance a float trace by ``len(eps)`` interval steps in compiled code.

    Parameters
    ----------
    trace : ProcessTrace
        Scalar float trace; modified in place.
    eps, delta, lam : array_like
        Per-step schedule values and interval coefficients (``lam=1`` is the
        max rule, ``lam=0`` the min rule).  Scalars broadcast.
    check_eps, check_delta : array_like, optional
        A second schedule whose admissible interval every new term must lie
        in; the largest excursion is returned.

    Returns
    -------
    float
        Largest excursion outside the check interval (0 when unchecked).
    """
    _require_scalar(trace)
    if trace.exact:
        raise ValueError("run_schedule needs a float trace")
    eps = np.asarray(eps, dtype=np.float64)
    steps = eps.shape[0] if eps.ndim else None
    if steps is None:
        raise ValueError("eps must be an array of per-step values")
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (steps,)).copy()
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (steps,)).copy()
    if np.any((eps <= 0) | (eps > SCHEDULE_CAP)) or np.any((delta <= 0) | (delta > SCHEDULE_CAP)):
        raise ValueError("schedule values must lie in (0, 1/2]")
    if np.any((lam < 0) | (lam > 1)):
        raise ValueError("lambda values must lie in [0, 1]")
    if check_eps is None:
        ce = np.empty(0)
        cd = np.empty(0)
    else:
        ce = np.broadcast_to(np.asarray(check_eps, dtype=np.float64), (steps,)).copy()
        cd = np.broadcast_to(np.asarray(check_delta, dtype=np.float64), (steps,)).copy()
    trace._check_room(steps)
    trace._reserve(trace.n + steps)
    acc = trace.accumulator
    start = 0
    worst = 0.0
    while True:
        root, n, s, comp, done, status, viol = _run_kernel(
            acc.F, acc.I, acc.stack, acc.root, trace._vals, trace._n,
            trace._sum, trace._comp, eps, delta, lam, ce, cd, start)
        worst = max(worst, viol)
        acc.root, acc.n = root, n
        trace._n, trace._sum, trace._comp = n, s, comp
        if status == 0:
            break
        acc.grow_stack()
        start = done
    return worst
