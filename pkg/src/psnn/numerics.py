"""Small dense linear-algebra helpers, seeded randomness and set matching.

Every random draw in the package goes through :class:`RandomSource`, which
pins numpy's counter-based Philox bit generator so that identical seeds give
identical streams regardless of platform or numpy's default generator.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError, ContractViolation

#: Largest set size solved by exhaustive enumeration of bijections.
BRUTE_FORCE_LIMIT = 8


def affine(M, x, b):
    """Return ``M @ x + b`` after checking dimensions."""
    M = np.asarray(M, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if M.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise ConfigurationError("affine expects a matrix and two vectors")
    if M.shape[1] != x.shape[0] or M.shape[0] != b.shape[0]:
        raise ConfigurationError(
            f"dimension mismatch: M is {M.shape}, x has {x.shape[0]}, b has {b.shape[0]}"
        )
    return M @ x + b


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


class RandomSource:
    """Seeded random stream backed by Philox.

    A source is owned by one consumer. Parallel or nested consumers should
    take independent children from :meth:`spawn` or :meth:`child`.
    """

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self.seed = self._seq.entropy
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    def spawn(self, n: int) -> list["RandomSource"]:
        return [RandomSource(s) for s in self._seq.spawn(n)]

    @staticmethod
    def child(seed: int, *keys: int) -> "RandomSource":
        """Source keyed by ``(seed, *keys)``, independent of draw history."""
        return RandomSource(np.random.SeedSequence([int(seed), *map(int, keys)]))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)


def pairwise_distances(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    return np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=-1))


@lru_cache(maxsize=BRUTE_FORCE_LIMIT + 1)
def _permutations(n):
    return np.array(list(itertools.permutations(range(n))), dtype=np.intp).reshape(-1, n)


def min_assignment_cost(A, B, cost=None, method="auto"):
    """Minimum total cost over all bijections between point sets ``A`` and ``B``.

    ``cost[i, j]`` is the price of matching ``A[i]`` with ``B[j]``; it defaults
    to the Euclidean distance. ``method`` is ``"brute"`` (enumerate every
    permutation), ``"hungarian"`` (optimal O(n^3) assignment) or ``"auto"``,
    which enumerates up to :data:`BRUTE_FORCE_LIMIT` points.
    """
    A = np.asarray(A, dtype=np.float64).reshape(len(A), -1) if len(A) else np.zeros((0, 0))
    B = np.asarray(B, dtype=np.float64).reshape(len(B), -1) if len(B) else np.zeros((0, 0))
    if len(A) != len(B):
        raise ContractViolation(f"sets differ in size: {len(A)} vs {len(B)}")
    n = len(A)
    if n == 0:
        return 0.0
    C = pairwise_distances(A, B) if cost is None else np.asarray(cost, dtype=np.float64)
    if C.shape != (n, n):
        raise ContractViolation(f"cost matrix has shape {C.shape}, expected ({n}, {n})")
    if method == "auto":
        method = "brute" if n <= BRUTE_FORCE_LIMIT else "hungarian"
    if method == "brute":
        if n > BRUTE_FORCE_LIMIT:
            raise ContractViolation(f"brute force limited to {BRUTE_FORCE_LIMIT} points")
        perms = _permutations(n)
        totals = C[np.arange(n), perms].sum(axis=1)
        return float(totals.min())
    if method == "hungarian":
        rows, cols = linear_sum_assignment(C)
        return float(C[rows, cols].sum())
    raise ConfigurationError(f"unknown assignment method {method!r}")
