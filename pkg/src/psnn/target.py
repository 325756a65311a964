"""Target fields for solution location and stability.

For a parameter with solution set S = {U_1..U_p} and stability flags s_j
(0 stable, 1 unstable) the solution target is a sum of Gaussian bumps

    phi(U)   = sum_j exp(-|U - U_j|^2 / delta)
    phi_s(U) = sum_j (-1)^{s_j} exp(-|U - U_j|^2 / delta)

with a per-parameter width ``delta`` from :func:`deviation`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractViolation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeviationConfig:
    """Width rules: ``delta0`` floor, ``delta1`` single-solution width, k-NN size for estimates."""

    delta0: float = 0.01
    delta1: float = 0.1 * np.sqrt(2.0)
    neighbors: int = 8

    def __post_init__(self):
        if self.delta0 <= 0 or self.delta1 <= 0:
            raise ContractViolation("delta0 and delta1 must be positive")
        if self.neighbors < 1:
            raise ContractViolation("neighbors must be at least 1")

    @classmethod
    def for_domain(cls, domain, delta0=0.01, fraction=0.1, neighbors=8):
        return cls(delta0=delta0, delta1=fraction * domain.diameter, neighbors=neighbors)


def deviation(solutions, cfg: DeviationConfig) -> float:
    """Quarter of the smallest pairwise distance, floored at ``delta0``; ``delta1`` for one solution."""
    S = np.asarray(solutions, dtype=np.float64)
    if S.ndim != 2 or len(S) == 0:
        raise ContractViolation("deviation needs at least one solution")
    if len(S) == 1:
        return float(cfg.delta1)
    diff = S[:, None, :] - S[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    iu = np.triu_indices(len(S), 1)
    return float(max(0.25 * dist[iu].min(), cfg.delta0))


@dataclass
class LabeledSolutionSet:
    theta: np.ndarray
    solutions: np.ndarray
    flags: np.ndarray
    delta: float = 1.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        sol = np.asarray(self.solutions, dtype=np.float64)
        if sol.ndim != 2:
            sol = sol.reshape(len(sol), -1) if sol.size else np.zeros((0, len(self.theta)))
        self.solutions = sol
        self.flags = np.asarray(self.flags, dtype=np.int64)
        if len(self.flags) != len(self.solutions):
            raise ContractViolation("one stability flag per solution is required")

    @classmethod
    def build(cls, theta, solutions, flags, cfg: DeviationConfig, delta: Optional[float] = None):
        solutions = np.asarray(solutions, dtype=np.float64)
        if delta is None:
            delta = deviation(solutions, cfg) if len(solutions) else 1.0
        return cls(theta, solutions, flags, float(delta))


def _bumps(U, labeled: LabeledSolutionSet) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if len(labeled.solutions) == 0:
        return np.zeros(U.shape[:-1] + (0,))
    d2 = ((U[..., None, :] - labeled.solutions) ** 2).sum(-1)
    return np.exp(-d2 / labeled.delta)


def phi(U, labeled: LabeledSolutionSet):
    """Solution target at ``U`` (a point or an array of points along the last axis)."""
    out = _bumps(U, labeled).sum(-1)
    return float(out) if np.ndim(out) == 0 else out


def phi_s(U, labeled: LabeledSolutionSet):
    """Stability target: bumps signed +1 for stable, -1 for unstable solutions."""
    signs = np.where(labeled.flags == 0, 1.0, -1.0)
    out = (_bumps(U, labeled) * signs).sum(-1)
    return float(out) if np.ndim(out) == 0 else out


def _nearest(theta, thetas, k, scale):
    d = np.linalg.norm((thetas - theta) / scale, axis=1)
    self_mask = d == 0
    d = np.where(self_mask, np.inf, d)
    order = np.argsort(d, kind="stable")[: min(k, int(np.isfinite(d).sum()))]
    return order


def deviation_incomplete(theta, thetas, solution_sets: Sequence, cfg: DeviationConfig, scale=None):
    """Width estimate for a parameter whose observed solution set may be incomplete.

    The neighbourhood is ``theta``'s own record (if present in ``thetas``) plus its
    ``cfg.neighbors`` nearest other parameters, with distances measured after
    dividing coordinates by ``scale`` (typically the parameter box widths). Among
    members with the largest observed count, the mean of their deviations is
    returned, each computed from its observed set.
    """
    theta = np.asarray(theta, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    scale = np.ones(theta.shape) if scale is None else np.asarray(scale, dtype=np.float64)
    members = list(_nearest(theta, thetas, cfg.neighbors, scale))
    own = np.flatnonzero(np.all(thetas == theta, axis=1))
    members = list(own) + members
    counts = np.array([len(solution_sets[i]) for i in members])
    top = counts.max() if len(counts) else 0
    if top < 1:
        log.warning("no neighbour of theta=%s has an observed solution; using delta1", theta)
        return float(cfg.delta1)
    vals = [deviation(solution_sets[i], cfg) for i, c in zip(members, counts) if c == top]
    return float(np.mean(vals))


@dataclass
class NeighborhoodIndex:
    """Precomputed neighbourhood counts ``m_eps`` for a fixed set of observations."""

    thetas: np.ndarray
    solution_sets: list
    cfg: DeviationConfig
    scale: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def max_count(self, i: int) -> int:
        members = [i] + list(_nearest(self.thetas[i], self.thetas, self.cfg.neighbors, self.scale))
        return max(len(self.solution_sets[j]) for j in members)

    def estimate(self, i: int) -> float:
        if i not in self._cache:
            self._cache[i] = deviation_incomplete(
                self.thetas[i], self.thetas, self.solution_sets, self.cfg, self.scale
            )
        return self._cache[i]
