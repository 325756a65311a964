"""Parameterized algebraic systems G(U, theta) = 0 and the Gray-Scott oracle.

The Gray-Scott kinetics (spatially homogeneous steady states)::

    -u v^2 + f (1 - u) = 0
     u v^2 - (f + k) v = 0

have, besides the trivial state (1, 0), two states when f > 4 (f + k)^2 and
none when f < 4 (f + k)^2. Only the nontrivial states are reported.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolation, NumericalDomainError

#: Parameters with |f - 4 (f + k)^2| below this are treated as lying on the fold.
BOUNDARY_BAND = 1e-10
#: Real parts within this band of zero are reported as indeterminate.
TOL_EIG = 1e-9


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``prod_i (lo_i, hi_i)``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ContractViolation(f"empty box {self.lo} .. {self.hi}")

    @classmethod
    def from_bounds(cls, bounds):
        lo, hi = zip(*[(float(a), float(b)) for a, b in bounds])
        return cls(tuple(lo), tuple(hi))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lower(self) -> np.ndarray:
        return np.array(self.lo, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array(self.hi, dtype=np.float64)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.widths))

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def bounds(self) -> list:
        return [[a, b] for a, b in zip(self.lo, self.hi)]

    def contains(self, x, closed=False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if closed:
            return np.all((x >= self.lower) & (x <= self.upper), axis=-1)
        return np.all((x > self.lower) & (x < self.upper), axis=-1)

    def sample(self, rng, size) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(size, self.dim))

    def grid(self, counts) -> np.ndarray:
        """Tensor grid with ``counts[i]`` points along axis ``i``, endpoints included."""
        axes = [np.linspace(a, b, int(c)) for a, b, c in zip(self.lo, self.hi, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class SystemDefinition:
    name: str
    n: int
    m: int
    solution_box: Box
    parameter_box: Box
    residual_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jacobian_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class RegionLabel:
    index: int
    count: int
    on_boundary: bool = False


class Stability(str, enum.Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    INDETERMINATE = "indeterminate"


def _check_dims(sys, U, theta):
    U = np.asarray(U, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if U.shape != (sys.n,) or theta.shape != (sys.m,):
        raise ContractViolation(
            f"{sys.name} expects U of length {sys.n} and theta of length {sys.m}, "
            f"got {U.shape} and {theta.shape}"
        )
    return U, theta


def residual(sys: SystemDefinition, U, theta) -> np.ndarray:
    U, theta = _check_dims(sys, U, theta)
    G = np.asarray(sys.residual_fn(U, theta), dtype=np.float64)
    if not np.all(np.isfinite(G)):
        raise NumericalDomainError(f"non-finite residual at U={U}, theta={theta}")
    return G


def jacobian(sys: SystemDefinition, U, theta, *, finite_difference=False) -> np.ndarray:
    """dG/dU at (U, theta).

    The analytic Jacobian is used when the system provides one, unless
    ``finite_difference`` is set; otherwise central differences with step
    ``1e-6 * (1 + |U|_inf)``.
    """
    U, theta = _check_dims(sys, U, theta)
    if sys.jacobian_fn is not None and not finite_difference:
        J = np.asarray(sys.jacobian_fn(U, theta), dtype=np.float64)
    else:
        h = 1e-6 * (1.0 + np.max(np.abs(U), initial=0.0))
        J = np.empty((sys.n, sys.n))
        for j in range(sys.n):
            e = np.zeros(sys.n)
            e[j] = h
            J[:, j] = (sys.residual_fn(U + e, theta) - sys.residual_fn(U - e, theta)) / (2 * h)
    if not np.all(np.isfinite(J)):
        raise NumericalDomainError(f"non-finite Jacobian at U={U}, theta={theta}")
    return J


def linear_stability(sys, U, theta, *, residual_tol=1e-8, tol_eig=TOL_EIG) -> Stability:
    """Classify a steady state by the real parts of its Jacobian eigenvalues."""
    G = residual(sys, U, theta)
    if np.max(np.abs(G)) >= residual_tol:
        raise ContractViolation(f"U={U} is not a steady state: |G|_inf = {np.max(np.abs(G)):.3e}")
    return classify_jacobian(jacobian(sys, U, theta), tol_eig=tol_eig)


def classify_jacobian(J, tol_eig=TOL_EIG) -> Stability:
    re = np.linalg.eigvals(np.asarray(J, dtype=np.float64)).real
    if np.all(re < -tol_eig):
        return Stability.STABLE
    if np.any(re > tol_eig):
        return Stability.UNSTABLE
    return Stability.INDETERMINATE


# -- Gray-Scott --------------------------------------------------------------

GS_OMEGA = Box((0.0, 0.0), (0.3, 0.08))
GS_DOMAIN = Box((0.0, 0.0), (1.0, 1.0))


def _gs_residual(U, theta):
    u, v = U
    f, k = theta
    return np.array([-u * v * v + f * (1.0 - u), u * v * v - (f + k) * v])


def _gs_jacobian(U, theta):
    u, v = U
    f, k = theta
    return np.array([[-v * v - f, -2.0 * u * v], [v * v, 2.0 * u * v - (f + k)]])


GRAY_SCOTT = SystemDefinition(
    name="gray-scott",
    n=2,
    m=2,
    solution_box=GS_DOMAIN,
    parameter_box=GS_OMEGA,
    residual_fn=_gs_residual,
    jacobian_fn=_gs_jacobian,
)


def _gs_theta(theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (2,) or not GS_OMEGA.contains(theta):
        raise NumericalDomainError(f"theta={theta} lies outside Omega={GS_OMEGA.bounds()}")
    return float(theta[0]), float(theta[1])


def fold_margin(theta) -> float:
    """f - 4 (f + k)^2; positive inside the two-solution region."""
    f, k = np.asarray(theta, dtype=np.float64)
    return float(f - 4.0 * (f + k) ** 2)


def stability_margin(theta) -> float:
    """f sqrt(f^2 - 4 f (f+k)^2) + f^2 - 2 (f+k)^3; positive where the first state is stable."""
    f, k = np.asarray(theta, dtype=np.float64)
    disc = f * f - 4.0 * f * (f + k) ** 2
    if disc < 0:
        raise NumericalDomainError(f"theta={theta} has no steady states")
    return float(f * np.sqrt(disc) + f * f - 2.0 * (f + k) ** 3)


def gray_scott_solutions(theta) -> np.ndarray:
    """Closed-form nontrivial steady states, shape ``(count, 2)``.

    On the fold (within :data:`BOUNDARY_BAND`) the single double root is returned.
    """
    f, k = _gs_theta(theta)
    margin = f - 4.0 * (f + k) ** 2
    if abs(margin) < BOUNDARY_BAND:
        return np.array([[0.5, f / (2.0 * (f + k))]])
    if margin < 0:
        return np.zeros((0, 2))
    s = np.sqrt(f * f - 4.0 * f * (f + k) ** 2)
    return np.array(
        [
            [(f - s) / (2.0 * f), (f + s) / (2.0 * (f + k))],
            [(f + s) / (2.0 * f), (f - s) / (2.0 * (f + k))],
        ]
    )


def gray_scott_region(theta) -> RegionLabel:
    f, k = _gs_theta(theta)
    margin = f - 4.0 * (f + k) ** 2
    if abs(margin) < BOUNDARY_BAND:
        return RegionLabel(index=-1, count=1, on_boundary=True)
    if margin > 0:
        return RegionLabel(index=1, count=2)
    return RegionLabel(index=0, count=0)


def gray_scott_stability(theta) -> tuple:
    """Flags (0 stable, 1 unstable) for the two states of :func:`gray_scott_solutions`."""
    f, k = _gs_theta(theta)
    if f - 4.0 * (f + k) ** 2 <= 0:
        raise NumericalDomainError(f"theta={theta} lies outside the two-solution region")
    return (0, 1) if stability_margin(theta) > 0 else (1, 1)


def gray_scott_oracle(theta):
    """Full observation for ``theta``: (solutions, stability flags)."""
    sols = gray_scott_solutions(theta)
    if len(sols) == 2:
        return sols, np.array(gray_scott_stability(theta), dtype=np.int64)
    return sols, np.zeros(len(sols), dtype=np.int64)


SYSTEMS = {"gray-scott": (GRAY_SCOTT, gray_scott_oracle)}
