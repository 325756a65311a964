"""Turning a trained field into solution sets.

A parameter's solutions are read off the network output on a grid of D:
points above a cut value are collected and clustered with K-means, the
cluster count chosen by silhouette score. The cut itself is tuned on a
held-out split. A mean-shift estimator working directly on training samples
serves as the baseline.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .network import PsnnModel, field_on_grid
from .numerics import RandomSource, min_assignment_cost
from .system import Box

log = logging.getLogger(__name__)

DUPLICATE_TOL = 1e-6
STABLE, UNSTABLE, UNKNOWN = "stable", "unstable", "unknown"


@dataclass(frozen=True)
class GridSpec:
    counts: tuple = (101, 101)

    def __post_init__(self):
        if any(int(c) < 2 for c in self.counts):
            raise ConfigurationError("grid needs at least 2 points per dimension")

    def points(self, domain: Box) -> np.ndarray:
        if len(self.counts) != domain.dim:
            raise ContractViolation(f"grid has {len(self.counts)} axes, domain has {domain.dim}")
        return domain.grid(self.counts)


@dataclass(frozen=True)
class ClusterParams:
    """K-means and model-selection settings.

    ``silhouette_sample`` caps the number of points scored by the silhouette;
    larger sets are scored on a seeded subsample.
    """

    c_max: int = 5
    sil1: float = 0.38
    restarts: int = 10
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0
    silhouette_sample: int = 2000

    def __post_init__(self):
        if self.c_max < 2:
            raise ConfigurationError("c_max must be at least 2")
        if not 0 < self.sil1 < 1:
            raise ConfigurationError("sil1 must lie in (0, 1)")
        if self.restarts < 1 or self.max_iter < 1:
            raise ConfigurationError("restarts and max_iter must be positive")
        if self.silhouette_sample < 2:
            raise ConfigurationError("silhouette_sample must be at least 2")


@dataclass(frozen=True)
class CutSearchConfig:
    lo: float = 0.3
    hi: float = 0.9
    count: int = 11

    def __post_init__(self):
        if not (0 <= self.lo < self.hi <= 1):
            raise ConfigurationError("cut range must satisfy 0 <= lo < hi <= 1")
        if self.count < 1:
            raise ConfigurationError("need at least one cut value")

    def cuts(self) -> np.ndarray:
        if self.count == 1:
            return np.array([self.lo])
        return np.round(np.linspace(self.lo, self.hi, self.count), 12)


@dataclass
class LocateResult:
    theta: np.ndarray
    centers: np.ndarray
    labels: list = field(default_factory=list)
    silhouette: float = float("nan")
    n_collected: int = 0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        c = np.asarray(self.centers, dtype=np.float64)
        self.centers = c.reshape(len(c), -1) if c.size else np.zeros((0, 0))
        if self.labels and len(self.labels) != len(self.centers):
            raise ContractViolation("one stability label per center")

    @property
    def count(self) -> int:
        return len(self.centers)

    def signature(self) -> str:
        return stability_signature(self.labels, self.count)

    def csv_row(self, c_max: int, dim: int) -> list:
        row = [repr(float(t)) for t in self.theta] + [self.count]
        for i in range(c_max):
            row += [repr(float(x)) for x in self.centers[i]] if i < self.count else [""] * dim
        labels = list(self.labels) + [""] * (c_max - len(self.labels))
        return row + labels[:c_max] + [repr(float(self.silhouette)), self.n_collected]


def locate_header(theta_names, solution_names, c_max: int) -> list:
    head = list(theta_names) + ["n_centers"]
    for i in range(1, c_max + 1):
        head += [f"c{i}_{s}" for s in solution_names]
    return head + [f"label{i}" for i in range(1, c_max + 1)] + ["silhouette", "n_collected"]


def write_locate_csv(path, results: Sequence[LocateResult], theta_names, solution_names, c_max: int):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(locate_header(theta_names, solution_names, c_max))
        for r in results:
            w.writerow(r.csv_row(c_max, len(solution_names)))


def stability_signature(labels, count=None) -> str:
    """Class name for a labelled solution set: none, 2-unstable, 1-stable-1-unstable, 2-stable or other."""
    count = len(labels) if count is None else count
    if count == 0:
        return "none"
    if count != 2 or len(labels) != 2:
        return "other"
    n_stable = sum(1 for x in labels if x == STABLE)
    n_unstable = sum(1 for x in labels if x == UNSTABLE)
    if n_stable + n_unstable != 2:
        return "other"
    return {0: "2-unstable", 1: "1-stable-1-unstable", 2: "2-stable"}[n_stable]


# -- K-means -----------------------------------------------------------------


def _sq_dist(X, C):
    # per-axis differences: the |x|^2 - 2xc + |c|^2 expansion loses exact zeros
    out = np.zeros((len(X), len(C)))
    for j in range(X.shape[1]):
        out += (X[:, j, None] - C[None, :, j]) ** 2
    return out


def kmeans_pp_init(X, k, rng: RandomSource) -> np.ndarray:
    """Distance-weighted seeding: each new center drawn with probability proportional to squared distance."""
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(len(X))])
        else:
            centers.append(X[rng.choice(len(X), p=d2 / total)])
        d2 = np.minimum(d2, ((X - centers[-1]) ** 2).sum(1))
    return np.array(centers)


def _assign(X, C):
    d2 = (X[:, :1] - C[:, 0]) ** 2
    for j in range(1, X.shape[1]):
        d2 += (X[:, j:j + 1] - C[:, j]) ** 2
    assign = np.argmin(d2, axis=1)
    return assign, float(np.take_along_axis(d2, assign[:, None], 1).sum())


def lloyd(X, centers, max_iter=100, tol=1e-6):
    """Lloyd iterations from ``centers``; returns centers, assignment, inertia and the inertia history.

    An emptied cluster keeps its previous center. Stops once the relative drop
    in inertia is at most ``tol``.
    """
    C = np.array(centers, dtype=np.float64)
    k = len(C)
    assign, inertia = _assign(X, C)
    history = [inertia]
    for _ in range(max_iter):
        sizes = np.bincount(assign, minlength=k)
        filled = sizes > 0
        for j in range(X.shape[1]):
            sums = np.bincount(assign, weights=X[:, j], minlength=k)
            C[filled, j] = sums[filled] / sizes[filled]
        assign, new = _assign(X, C)
        history.append(new)
        done = inertia - new <= tol * max(inertia, 1e-300)
        inertia = new
        if done:
            break
    return C, assign, inertia, history


def kmeans(points, k, params: ClusterParams = ClusterParams()):
    """Best of ``params.restarts`` seeded Lloyd runs; returns (centers, assignment, inertia)."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ContractViolation("points must be a 2-d array")
    if not 1 <= k <= len(X):
        raise ContractViolation(f"k={k} needs 1 <= k <= {len(X)} points")
    if k == 1:
        c = X.mean(axis=0, keepdims=True)
        return c, np.zeros(len(X), dtype=np.intp), float(((X - c) ** 2).sum())
    best = None
    for r in range(params.restarts):
        rng = RandomSource.child(params.seed, k, r)
        C, assign, inertia, _ = lloyd(X, kmeans_pp_init(X, k, rng), params.max_iter, params.tol)
        if best is None or inertia < best[2]:
            best = (C, assign, inertia)
    return best


def silhouette(points, assignment, distances=None, chunk=1024) -> float:
    """Mean silhouette coefficient; singleton clusters score 0, as do points with a = b = 0.

    ``distances`` may hold the precomputed pairwise distance matrix of ``points``.
    """
    X = np.asarray(points, dtype=np.float64)
    labels, assign = np.unique(np.asarray(assignment), return_inverse=True)
    assign = assign.ravel()
    k = len(labels)
    if k < 2:
        raise ContractViolation("silhouette needs at least two nonempty clusters")
    onehot = np.zeros((len(X), k))
    onehot[np.arange(len(X)), assign] = 1.0
    sizes = onehot.sum(0)
    scores = np.empty(len(X))
    for s in range(0, len(X), chunk):
        D = np.sqrt(_sq_dist(X[s:s + chunk], X)) if distances is None else distances[s:s + chunk]
        sums = D @ onehot
        own = assign[s:s + chunk]
        rows = np.arange(len(own))
        own_size = sizes[own]
        a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
        means = sums / sizes
        means[rows, own] = np.inf
        b = means.min(1)
        denom = np.maximum(a, b)
        sc = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        scores[s:s + chunk] = np.where(own_size > 1, sc, 0.0)
    return float(scores.mean())


def dedupe_centers(centers, tol=DUPLICATE_TOL) -> np.ndarray:
    kept = []
    for c in np.asarray(centers, dtype=np.float64):
        if all(np.linalg.norm(c - o) >= tol for o in kept):
            kept.append(c)
    return np.array(kept).reshape(len(kept), -1)


def cluster_fn(points, params: ClusterParams = ClusterParams()):
    """Centers for a collected point set and the best silhouette seen.

    Tries k = 2..c_max. If the best silhouette reaches ``sil1`` those centers
    are returned, otherwise the single mean point.
    """
    X = np.asarray(points, dtype=np.float64)
    if len(X) == 0:
        raise ContractViolation("cluster_fn needs at least one point")
    if len(X) < 2:
        return X[:1].copy(), float("nan")
    n_distinct = len(np.unique(X, axis=0))
    score_idx = np.arange(len(X))
    if len(X) > params.silhouette_sample:
        rng = RandomSource.child(params.seed, len(X))
        score_idx = np.sort(rng.choice(len(X), size=params.silhouette_sample, replace=False))
    S = X[score_idx]
    D = np.sqrt(_sq_dist(S, S))
    best_sil, best_centers = -np.inf, None
    for k in range(2, min(params.c_max, n_distinct) + 1):
        C, assign, _ = kmeans(X, k, params)
        sub = assign[score_idx]
        if len(np.unique(sub)) < 2:
            continue
        sil = silhouette(S, sub, D)
        if sil > best_sil:
            best_sil, best_centers = sil, C
    if best_centers is not None and best_sil >= params.sil1:
        return best_centers, float(best_sil)
    return X.mean(axis=0, keepdims=True), float(best_sil) if best_centers is not None else float("nan")


# -- locating ----------------------------------------------------------------


def evaluate_field(model, grid, theta) -> np.ndarray:
    """Model output over ``grid`` at one parameter; any callable ``model(grid, theta)`` works too."""
    if isinstance(model, PsnnModel):
        return field_on_grid(model, grid, theta)
    return np.asarray(model(grid, theta), dtype=np.float64)


def collect(model, theta, grid, L_cut, values=None) -> np.ndarray:
    """Grid points where the output is at least ``L_cut``, in grid order."""
    if not 0 < L_cut < 1:
        raise ContractViolation("L_cut must lie in (0, 1)")
    vals = evaluate_field(model, grid, theta) if values is None else values
    return grid[vals >= L_cut]


def label_centers(stability_model, centers, theta) -> list:
    if stability_model is None:
        return [UNKNOWN] * len(centers)
    if len(centers) == 0:
        return []
    z = np.atleast_1d(evaluate_field(stability_model, centers, theta))
    return [STABLE if v > 0 else UNSTABLE for v in z]


def centers_from_points(points, params: ClusterParams):
    if len(points) == 0:
        return np.zeros((0, points.shape[1] if points.ndim == 2 else 0)), float("nan")
    C, sil = cluster_fn(points, params)
    return dedupe_centers(C), sil


def locate(model, stability_model, theta, grid, L_cut, params: ClusterParams = ClusterParams(), values=None):
    """Solution centers at ``theta`` with stability labels from the sign of the stability model."""
    pts = collect(model, theta, grid, L_cut, values)
    centers, sil = centers_from_points(pts, params)
    return LocateResult(theta, centers, label_centers(stability_model, centers, theta), sil, len(pts))


def set_distance(predicted, truth, domain: Box) -> float:
    """Mean matched distance between equal-size point sets over the best bijection, relative to diam(D)."""
    P = np.asarray(predicted, dtype=np.float64)
    T = np.asarray(truth, dtype=np.float64)
    if len(P) != len(T):
        raise ContractViolation(f"set sizes differ: {len(P)} vs {len(T)}")
    if len(P) == 0:
        return 0.0
    return min_assignment_cost(P.reshape(len(P), -1), T.reshape(len(T), -1)) / (len(P) * domain.diameter)


def parameter_error(predicted, truth, domain: Box) -> float:
    """Per-parameter term of the cut-search objective: set distance if counts match, else 1."""
    if len(predicted) != len(truth):
        return 1.0
    return set_distance(predicted, truth, domain)


def _map(fn, items, workers):
    if workers is None or workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


class _CutTrial:
    """Picklable worker: errors at every cut for one parameter."""

    def __init__(self, model, grid, cuts, params, domain):
        self.model, self.grid, self.cuts, self.params, self.domain = model, grid, cuts, params, domain

    def __call__(self, item):
        theta, truth = item
        vals = evaluate_field(self.model, self.grid, theta)
        out = []
        for L in self.cuts:
            centers, _ = centers_from_points(self.grid[vals >= L], self.params)
            out.append(parameter_error(centers, truth, self.domain))
        return out


@dataclass
class CutSearchResult:
    cut: float
    cuts: np.ndarray
    errors: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["L_cut", "average_error"])
            for c, e in zip(self.cuts, self.errors):
                w.writerow([repr(float(c)), repr(float(e))])


def average_errors(model, records, grid, domain: Box, cuts, params: ClusterParams = ClusterParams(), workers=1):
    """Objective value at each cut: mean per-parameter error over ``records`` (objects with theta, solutions)."""
    items = [(r.theta, r.solutions) for r in records]
    if not items:
        raise ContractViolation("cut search needs a nonempty search split")
    per = np.array(_map(_CutTrial(model, grid, list(cuts), params, domain), items, workers))
    return per.mean(axis=0)


def cut_search(model, records, grid, domain: Box, config: CutSearchConfig = CutSearchConfig(),
               params: ClusterParams = ClusterParams(), workers=1) -> CutSearchResult:
    """Cut value minimising the average error over the search records; ties go to the smallest cut."""
    cuts = config.cuts()
    errs = average_errors(model, records, grid, domain, cuts, params, workers)
    best = int(np.flatnonzero(errs == errs.min())[0])
    log.info("cut search: best L_cut %.3f with error %.4f", cuts[best], errs[best])
    return CutSearchResult(float(cuts[best]), cuts, errs)


class _Locator:
    def __init__(self, model, stability_model, grid, L_cut, params):
        self.args = (model, stability_model, grid, L_cut, params)

    def __call__(self, theta):
        model, stab, grid, L, params = self.args
        return locate(model, stab, theta, grid, L, params)


def locate_many(model, stability_model, thetas, grid, L_cut, params: ClusterParams = ClusterParams(), workers=1):
    """:func:`locate` over many parameters, results in input order regardless of ``workers``."""
    return _map(_Locator(model, stability_model, grid, L_cut, params), [np.asarray(t) for t in thetas], workers)


# -- mean-shift baseline -----------------------------------------------------


@dataclass(frozen=True)
class MeanShiftParams:
    """Window sizes are absolute: ``gamma_p`` on every parameter axis, ``gamma_s`` on every solution axis."""

    gamma_p: float
    gamma_s: float
    L_cut: float = 0.5
    eps_tol: float = 1e-4
    n_initial: int = 50
    max_iter: int = 500

    @classmethod
    def for_boxes(cls, omega: Box, domain: Box, **kw):
        return cls(gamma_p=0.02 * omega.diameter, gamma_s=0.1 * domain.diameter, **kw)


@dataclass
class MeanShiftModes:
    """Converged modes at one parameter with their mean neighbourhood labels."""

    theta: np.ndarray
    modes: np.ndarray
    scores: np.ndarray

    def kept(self, L_cut) -> np.ndarray:
        return self.modes[self.scores >= L_cut]


def _neighbours(train_set, theta, gamma_p):
    near = np.all(np.abs(train_set.theta - theta) < gamma_p, axis=1)
    return train_set.U[near], train_set.target[near]


def meanshift_modes(train_set, theta, ms: MeanShiftParams, domain: Box, seed=0, starts=None) -> MeanShiftModes:
    """Run every start to convergence; starts whose weight sum drops to zero are discarded.

    ``starts`` overrides the ``ms.n_initial`` seeded uniform draws from ``domain``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    U_near, y_near = _neighbours(train_set, theta, ms.gamma_p)
    if starts is None:
        starts = domain.sample(RandomSource.child(seed, 7), ms.n_initial)
    modes, scores = [], []
    for U in starts:
        for _ in range(ms.max_iter):
            win = np.all(np.abs(U_near - U) < ms.gamma_s, axis=1)
            y = y_near[win]
            y_sum = y.sum()
            if not win.any() or y_sum <= 0:
                U = None
                break
            new = (y[:, None] * U_near[win]).sum(0) / y_sum
            moved = np.abs(new - U).max()
            U = new
            if moved < ms.eps_tol:
                break
        if U is None:
            continue
        win = np.all(np.abs(U_near - U) < ms.gamma_s, axis=1)
        modes.append(U)
        scores.append(float(y_near[win].mean()) if win.any() else 0.0)
    dim = domain.dim
    return MeanShiftModes(theta, np.array(modes).reshape(-1, dim), np.array(scores))


def _meanshift_labels(stability_set, centers, theta, ms: MeanShiftParams) -> list:
    if stability_set is None:
        return [UNKNOWN] * len(centers)
    U_near, y_near = _neighbours(stability_set, theta, ms.gamma_p)
    labels = []
    for c in centers:
        win = np.all(np.abs(U_near - c) < ms.gamma_s, axis=1)
        labels.append(STABLE if win.any() and y_near[win].mean() > 0 else UNSTABLE)
    return labels


def meanshift_locate(train_set, theta, ms: MeanShiftParams, domain: Box, params: ClusterParams = ClusterParams(),
                     stability_set=None, seed=0, modes: Optional[MeanShiftModes] = None) -> LocateResult:
    """Baseline locator: weighted mean-shift on the training samples near ``theta``, then :func:`cluster_fn`."""
    if len(train_set) == 0:
        raise ContractViolation("mean-shift needs a nonempty training set")
    modes = meanshift_modes(train_set, theta, ms, domain, seed) if modes is None else modes
    kept = modes.kept(ms.L_cut)
    centers, sil = centers_from_points(kept, params)
    labels = _meanshift_labels(stability_set, centers, theta, ms)
    return LocateResult(theta, centers, labels, sil, len(kept))


class _ModeTrial:
    def __init__(self, train_set, ms, domain, cuts, params, seed):
        self.args = (train_set, ms, domain, cuts, params, seed)

    def __call__(self, item):
        train_set, ms, domain, cuts, params, seed = self.args
        theta, truth = item
        modes = meanshift_modes(train_set, theta, ms, domain, seed)
        return [parameter_error(centers_from_points(modes.kept(L), params)[0], truth, domain) for L in cuts]


def meanshift_cut_search(train_set, records, ms: MeanShiftParams, domain: Box, config: CutSearchConfig = CutSearchConfig(),
                         params: ClusterParams = ClusterParams(), seed=0, workers=1) -> CutSearchResult:
    """The cut search objective applied to the mean-shift keep threshold; modes are computed once per parameter."""
    cuts = config.cuts()
    items = [(r.theta, r.solutions) for r in records]
    if not items:
        raise ContractViolation("cut search needs a nonempty search split")
    errs = np.array(_map(_ModeTrial(train_set, ms, domain, list(cuts), params, seed), items, workers)).mean(axis=0)
    best = int(np.flatnonzero(errs == errs.min())[0])
    return CutSearchResult(float(cuts[best]), cuts, errs)
