"""Order-statistic multiset with top-j / bottom-j partial sums.

The float accumulator is an array-backed treap keyed by
``(value, insertion order)`` and augmented with subtree counts and subtree
sums.  Insertions and both prefix-sum queries walk a single root-to-leaf path,
so they cost ``O(log n)`` comparisons in expectation.

:class:`ExactAccumulator` is a slower sorted-list counterpart over
:class:`fractions.Fraction` values, used to validate tolerance budgets on
small traces.
"""

from __future__ import annotations

import bisect
import math
from fractions import Fraction

import numpy as np
from numba import njit

__all__ = ["OrderStatAccumulator", "ExactAccumulator", "AUDIT_INTERVAL"]

AUDIT_INTERVAL = 1 << 20
_NIL = -1


# Node-major storage: F[i, VAL|SUM|PRI] floats, I[i, LEFT|RIGHT|CNT] ints.
VAL, SUM, PRI = 0, 1, 2
LEFT, RIGHT, CNT = 0, 1, 2


@njit(cache=True)
def _pull(node, F, I):
    c = 1
    s = F[node, VAL]
    l = I[node, LEFT]
    r = I[node, RIGHT]
    if l != _NIL:
        c += I[l, CNT]
        s += F[l, SUM]
    if r != _NIL:
        c += I[r, CNT]
        s += F[r, SUM]
    I[node, CNT] = c
    F[node, SUM] = s


@njit(cache=True)
def treap_insert(F, I, stack, root, node, x):
    """Insert ``x`` as ``node``; returns (new_root, comparisons).

    ``new_root == -2`` signals that the path stack was too short; the tree is
    left untouched in that case.
    """
    F[node, VAL] = x
    F[node, SUM] = x
    I[node, LEFT] = _NIL
    I[node, RIGHT] = _NIL
    I[node, CNT] = 1
    if root == _NIL:
        return node, 0
    comps = 0
    depth = 0
    cur = root
    while True:
        if depth == stack.shape[0]:
            # Undo the path updates and ask the caller for a bigger stack.
            for i in range(depth):
                I[stack[i], CNT] -= 1
                F[stack[i], SUM] -= x
            return -2, comps
        stack[depth] = cur
        depth += 1
        comps += 1
        I[cur, CNT] += 1
        F[cur, SUM] += x
        # Ties go right: the newer element has the larger insertion key.
        if x < F[cur, VAL]:
            nxt = I[cur, LEFT]
            if nxt == _NIL:
                I[cur, LEFT] = node
                break
        else:
            nxt = I[cur, RIGHT]
            if nxt == _NIL:
                I[cur, RIGHT] = node
                break
        cur = nxt
    # Rotate the new leaf up while it beats its parent's priority.
    while depth > 0:
        parent = stack[depth - 1]
        if F[node, PRI] <= F[parent, PRI]:
            break
        if I[parent, LEFT] == node:
            I[parent, LEFT] = I[node, RIGHT]
            I[node, RIGHT] = parent
        else:
            I[parent, RIGHT] = I[node, LEFT]
            I[node, LEFT] = parent
        _pull(parent, F, I)
        _pull(node, F, I)
        depth -= 1
        if depth > 0:
            gp = stack[depth - 1]
            if I[gp, LEFT] == parent:
                I[gp, LEFT] = node
            else:
                I[gp, RIGHT] = node
        else:
            root = node
    return root, comps


@njit(cache=True)
def treap_sum_top(F, I, root, j):
    """Sum of the j largest values and the number of nodes visited."""
    acc = 0.0
    comps = 0
    node = root
    rem = j
    while rem > 0:
        comps += 1
        r = I[node, RIGHT]
        rc = I[r, CNT] if r != _NIL else 0
        if rem < rc:
            node = r
            continue
        if rc > 0:
            acc += F[r, SUM]
        if rem == rc:
            break
        acc += F[node, VAL]
        rem -= rc + 1
        node = I[node, LEFT]
    return acc, comps


@njit(cache=True)
def treap_sum_bottom(F, I, root, j):
    """Sum of the j smallest values and the number of nodes visited."""
    acc = 0.0
    comps = 0
    node = root
    rem = j
    while rem > 0:
        comps += 1
        l = I[node, LEFT]
        lc = I[l, CNT] if l != _NIL else 0
        if rem < lc:
            node = l
            continue
        if lc > 0:
            acc += F[l, SUM]
        if rem == lc:
            break
        acc += F[node, VAL]
        rem -= lc + 1
        node = I[node, RIGHT]
    return acc, comps


@njit(cache=True)
def treap_select_top(F, I, root, j):
    """Value of the j-th largest element (1-based)."""
    node = root
    rem = j
    while True:
        r = I[node, RIGHT]
        rc = I[r, CNT] if r != _NIL else 0
        if rem <= rc:
            node = r
        elif rem == rc + 1:
            return F[node, VAL]
        else:
            rem -= rc + 1
            node = I[node, LEFT]


@njit(cache=True)
def _inorder(F, I, root, n, out):
    stack = np.empty(n + 1, dtype=np.int64)
    depth = 0
    cur = root
    k = 0
    while cur != _NIL or depth > 0:
        while cur != _NIL:
            stack[depth] = cur
            depth += 1
            cur = I[cur, LEFT]
        depth -= 1
        cur = stack[depth]
        out[k] = F[cur, VAL]
        k += 1
        cur = I[cur, RIGHT]
    return k


@njit(cache=True)
def _audit(F, I, root, n):
    """Recompute subtree sums post-order; return max abs drift (and fix it)."""
    if root == _NIL:
        return 0.0
    stack = np.empty(n + 1, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    k = 0
    stack[0] = root
    depth = 1
    while depth > 0:
        depth -= 1
        node = stack[depth]
        order[k] = node
        k += 1
        if I[node, LEFT] != _NIL:
            stack[depth] = I[node, LEFT]
            depth += 1
        if I[node, RIGHT] != _NIL:
            stack[depth] = I[node, RIGHT]
            depth += 1
    drift = 0.0
    for i in range(k - 1, -1, -1):
        node = order[i]
        old_s = F[node, SUM]
        old_c = I[node, CNT]
        _pull(node, F, I)
        d = abs(F[node, SUM] - old_s)
        if d > drift:
            drift = d
        if I[node, CNT] != old_c:
            drift = math.inf
    return drift


@njit(cache=True)
def _insert_many(F, I, stack, root, n, xs):
    """Insert ``xs`` in order; stops early (returning the count so far) if the
    path stack overflows."""
    total = 0
    for i in range(xs.shape[0]):
        r, c = treap_insert(F, I, stack, root, n, xs[i])
        if r == -2:
            break
        root = r
        n += 1
        total += c
    return root, n, total


_PRIORITY_SALT = 0x7E4B_5A17


class OrderStatAccumulator:
    """Multiset of floats with ``O(log n)`` insert and top/bottom prefix sums.

    Parameters
    ----------
    capacity : int, optional
        Initial node capacity; storage doubles on demand.
    seed : int, optional
        Seed for the treap priorities.  The tree shape depends on it but the
        query results do not.
    debug : bool, optional
        When true, run :meth:`audit` every ``AUDIT_INTERVAL`` inserts.

    Attributes
    ----------
    comparisons : int
        Cumulative number of key comparisons / node visits over all
        operations.
    last_comparisons : int
        Node visits of the most recent operation.

    Examples
    --------
    >>> acc = OrderStatAccumulator()
    >>> for x in (0.2, 0.9, 0.5):
    ...     acc.insert(x)
    >>> acc.count, round(acc.sum_top(2), 12), round(acc.sum_bottom(2), 12)
    (3, 1.4, 0.7)
    """

    def __init__(self, capacity=1024, seed=0, debug=False):
        capacity = max(16, int(capacity))
        # Salted so priorities never coincide with a caller's default_rng(seed)
        # data stream (equal keys and priorities degenerate the treap).
        self._rng = np.random.default_rng([int(seed), _PRIORITY_SALT])
        self.F = np.empty((capacity, 3), dtype=np.float64)
        self.I = np.empty((capacity, 3), dtype=np.int64)
        self.F[:, PRI] = self._rng.random(capacity)
        self.stack = np.empty(128, dtype=np.int64)
        self.root = _NIL
        self.n = 0
        self.debug = bool(debug)
        self.comparisons = 0
        self.last_comparisons = 0
        self.max_drift = 0.0

    # storage ---------------------------------------------------------------
    @property
    def capacity(self):
        return self.F.shape[0]

    def reserve(self, size):
        """Ensure room for ``size`` elements in total."""
        old = self.F.shape[0]
        if size <= old:
            return
        new = old
        while new < size:
            new *= 2
        F = np.empty((new, 3), dtype=np.float64)
        I = np.empty((new, 3), dtype=np.int64)
        F[:old] = self.F
        I[:old] = self.I
        # Priorities for fresh slots continue the same seeded stream.
        F[old:, PRI] = self._rng.random(new - old)
        self.F, self.I = F, I

    def grow_stack(self):
        self.stack = np.empty(2 * self.stack.shape[0], dtype=np.int64)

    # mutation --------------------------------------------------------------
    def insert(self, x):
        """Add ``x`` to the multiset.

        Raises
        ------
        ValueError
            If ``x`` is NaN or infinite.
        """
        x = float(x)
        if not math.isfinite(x):
            raise ValueError(f"cannot insert non-finite value {x!r}")
        if self.n == self.F.shape[0]:
            self.reserve(self.n + 1)
        while True:
            root, comps = treap_insert(self.F, self.I, self.stack, self.root, self.n, x)
            if root != -2:
                break
            self.grow_stack()
        self.root = root
        self.n += 1
        self.last_comparisons = comps
        self.comparisons += comps
        if self.debug and self.n % AUDIT_INTERVAL == 0:
            self.audit()

    def extend(self, xs):
        """Insert every value of ``xs`` (bulk path for float arrays)."""
        xs = np.ascontiguousarray(xs, dtype=np.float64).ravel()
        if not np.all(np.isfinite(xs)):
            raise ValueError("cannot insert non-finite values")
        if self.debug:
            for x in xs:
                self.insert(x)
            return
        self.reserve(self.n + xs.shape[0])
        done = 0
        while done < xs.shape[0]:
            root, n, comps = _insert_many(self.F, self.I, self.stack, self.root, self.n,
                                          xs[done:])
            done += n - self.n
            self.root, self.n = root, n
            self.comparisons += comps
            if done < xs.shape[0]:
                self.grow_stack()

    # queries ---------------------------------------------------------------
    @property
    def count(self):
        return self.n

    def __len__(self):
        return self.n

    @property
    def total(self):
        """Sum of all stored values (the root's subtree sum)."""
        return float(self.F[self.root, SUM]) if self.n else 0.0

    def _check_j(self, j):
        if int(j) != j or not (0 <= j <= self.n):
            raise ValueError(f"j={j!r} outside [0, {self.n}]")
        return int(j)

    def sum_top(self, j):
        """Sum of the ``j`` largest values."""
        j = self._check_j(j)
        if j == 0:
            self.last_comparisons = 0
            return 0.0
        s, comps = treap_sum_top(self.F, self.I, self.root, j)
        self.last_comparisons = comps
        self.comparisons += comps
        return s

    def sum_bottom(self, j):
        """Sum of the ``j`` smallest values."""
        j = self._check_j(j)
        if j == 0:
            self.last_comparisons = 0
            return 0.0
        s, comps = treap_sum_bottom(self.F, self.I, self.root, j)
        self.last_comparisons = comps
        self.comparisons += comps
        return s

    def mean_top(self, j):
        return self.sum_top(j) / j

    def mean_bottom(self, j):
        return self.sum_bottom(j) / j

    def kth_largest(self, j):
        """The ``j``-th largest value, ``1 <= j <= count``."""
        if not 1 <= j <= self.n:
            raise ValueError(f"j={j!r} outside [1, {self.n}]")
        return float(treap_select_top(self.F, self.I, self.root, int(j)))

    def sorted_values(self):
        """All stored values in ascending order."""
        out = np.empty(self.n, dtype=np.float64)
        if self.n:
            _inorder(self.F, self.I, self.root, self.n, out)
        return out

    def audit(self):
        """Re-sum every subtree from its children; return the largest drift."""
        drift = _audit(self.F, self.I, self.root, self.n)
        self.max_drift = max(self.max_drift, drift)
        return drift


class ExactAccumulator:
    """Sorted-list multiset of rationals with the same query interface.

    Insertion is ``O(n)``; intended for traces of at most a few thousand
    terms.
    """

    def __init__(self):
        self._sorted = []
        self._total = Fraction(0)

    def insert(self, x):
        x = Fraction(x)
        bisect.insort_right(self._sorted, x)
        self._total += x

    def extend(self, xs):
        for x in xs:
            self.insert(x)

    @property
    def count(self):
        return len(self._sorted)

    def __len__(self):
        return len(self._sorted)

    @property
    def total(self):
        return self._total

    def _check_j(self, j):
        if not (0 <= j <= len(self._sorted)):
            raise ValueError(f"j={j!r} outside [0, {len(self._sorted)}]")
        return int(j)

    def sum_top(self, j):
        j = self._check_j(j)
        return sum(self._sorted[len(self._sorted) - j:], Fraction(0))

    def sum_bottom(self, j):
        j = self._check_j(j)
        return sum(self._sorted[:j], Fraction(0))

    def mean_top(self, j):
        return self.sum_top(j) / j

    def mean_bottom(self, j):
        return self.sum_bottom(j) / j

    def kth_largest(self, j):
        if not 1 <= j <= len(self._sorted):
            raise ValueError(f"j={j!r} outside [1, {len(self._sorted)}]")
        return self._sorted[-j]

    def sorted_values(self):
        return list(self._sorted)
