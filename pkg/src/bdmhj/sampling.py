"""Discrete sampling structures: Vose alias table and a binary sum tree.

Both use a layout that the compiled event engine shares, so a state built in
Python can be handed to the engine and back without conversion.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


class AliasTable:
    """O(1) sampling from a fixed discrete distribution (Vose's method).

    A single uniform ``u`` in [0, 1) selects column ``k = floor(u n)``; the
    fractional part is compared with ``prob[k]`` to choose ``k`` or ``alias[k]``.
    """

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ConfigError("alias table needs a non-empty 1-d weight vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigError("alias weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ConfigError("alias weights sum to zero")
        n = w.size
        self.weights = w
        self.probabilities = w / total
        scaled = self.probabilities * n
        prob = np.ones(n)
        alias = np.arange(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        # leftovers are 1 up to rounding
        for i in small + large:
            prob[i] = 1.0
            alias[i] = i
        self.prob = prob
        self.alias = alias

    def __len__(self):
        return self.prob.size

    def index(self, u: float) -> int:
        n = self.prob.size
        x = u * n
        k = int(x)
        if k >= n:
            k = n - 1
        return k if x - k < self.prob[k] else int(self.alias[k])

    def sample(self, rng: np.random.Generator, size=None):
        if size is None:
            return self.index(rng.random())
        u = rng.random(size) * self.prob.size
        k = np.minimum(u.astype(np.int64), self.prob.size - 1)
        return np.where(u - k < self.prob[k], k, self.alias[k])


def tree_shape(m: int) -> tuple[int, int]:
    """Leaf offset ``M`` (a power of two >= m) and depth ``log2 M``."""
    M, depth = 1, 0
    while M < m:
        M *= 2
        depth += 1
    return M, depth


class RateTree:
    """Heap-ordered sum tree over ``m`` nonnegative weights.

    Node ``k`` has children ``2k`` and ``2k+1``; leaves sit at ``M + i``. The
    root ``tree[1]`` is the total. Updates and searches are O(log m).
    """

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        self.m = w.size
        self.M, self.depth = tree_shape(self.m)
        self.tree = np.zeros(2 * self.M)
        self.rebuild(w)

    def rebuild(self, weights):
        t = self.tree
        t[:] = 0.0
        t[self.M:self.M + self.m] = weights
        for k in range(self.M - 1, 0, -1):
            t[k] = t[2 * k] + t[2 * k + 1]

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaf(self, i: int) -> float:
        return float(self.tree[self.M + i])

    def add(self, i: int, delta: float):
        k = self.M + i
        t = self.tree
        for _ in range(self.depth + 1):
            t[k] += delta
            k >>= 1

    def find(self, v: float) -> tuple[int, float]:
        """Leaf index containing ``v`` in cumulative order, and the remainder within it."""
        t = self.tree
        k = 1
        for _ in range(self.depth):
            left = t[2 * k]
            if v >= left:
                v -= left
                k = 2 * k + 1
            else:
                k = 2 * k
        return k - self.M, v
