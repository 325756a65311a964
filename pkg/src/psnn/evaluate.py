"""Phase diagrams, error tables and the discrete kernel-decomposition check."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment

from .errors import ContractViolation, NumericalDomainError
from .locate import (
    STABLE,
    UNSTABLE,
    ClusterParams,
    LocateResult,
    _map,
    locate,
    meanshift_locate,
    set_distance,
    stability_signature,
)
from .system import GS_DOMAIN, GS_OMEGA, Box, fold_margin, gray_scott_oracle, stability_margin
from .target import DeviationConfig, LabeledSolutionSet, phi

log = logging.getLogger(__name__)

SIGNATURES = ("none", "2-unstable", "1-stable-1-unstable", "2-stable", "other")
SVG_SALT = "psnn"
FIG_COLORS = {
    "none": "#d9d9d9",
    "2-unstable": "#4c72b0",
    "1-stable-1-unstable": "#dd8452",
    "2-stable": "#55a868",
    "other": "#c44e52",
    0: "#d9d9d9",
    1: "#8172b3",
    2: "#4c72b0",
    3: "#937860",
    4: "#da8bc3",
    5: "#8c8c8c",
}


def cell_centers(box: Box, counts) -> np.ndarray:
    """Midpoints of a uniform ``counts`` tessellation of ``box``, first axis slowest."""
    axes = [lo + (np.arange(c) + 0.5) * (hi - lo) / c for lo, hi, c in zip(box.lo, box.hi, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def cell_weight(box: Box, counts) -> float:
    return float(box.volume / np.prod(counts))


# -- locators ----------------------------------------------------------------


class PsnnLocator:
    """Picklable ``theta -> LocateResult`` wrapper around :func:`locate`."""

    def __init__(self, model, stability_model, grid, L_cut, params: ClusterParams = ClusterParams()):
        self.model, self.stability_model, self.grid, self.L_cut, self.params = model, stability_model, grid, L_cut, params

    def __call__(self, theta) -> LocateResult:
        return locate(self.model, self.stability_model, theta, self.grid, self.L_cut, self.params)


class OracleLocator:
    """Answers with the analytic solution set; used to check the evaluation plumbing."""

    def __init__(self, oracle=gray_scott_oracle):
        self.oracle = oracle

    def __call__(self, theta) -> LocateResult:
        sols, flags = self.oracle(theta)
        labels = [STABLE if s == 0 else UNSTABLE for s in flags]
        return LocateResult(theta, sols, labels, float("nan"), len(sols))


class MeanShiftLocator:
    def __init__(self, train_set, ms, domain, params: ClusterParams = ClusterParams(), stability_set=None, seed=0):
        self.args = (train_set, ms, domain, params, stability_set, seed)

    def __call__(self, theta) -> LocateResult:
        train_set, ms, domain, params, stab, seed = self.args
        return meanshift_locate(train_set, theta, ms, domain, params, stab, seed)


# -- phase diagrams ----------------------------------------------------------


def true_signature(theta, oracle=gray_scott_oracle) -> str:
    sols, flags = oracle(theta)
    return stability_signature([STABLE if s == 0 else UNSTABLE for s in flags], len(sols))


def straddles_fold(center, half_widths) -> bool:
    """Whether the fold curve passes through the cell (corner margins change sign)."""
    f, k = center
    hf, hk = half_widths
    signs = {np.sign(fold_margin((f + a, k + b))) for a in (-hf, hf) for b in (-hk, hk)}
    return len(signs) > 1 or 0.0 in signs


@dataclass
class PhaseDiagram:
    thetas: np.ndarray
    counts: tuple
    pred_count: np.ndarray
    true_count: np.ndarray
    signature: list
    true_signature: list
    off_boundary: np.ndarray
    omega: Box = GS_OMEGA
    results: list = field(default_factory=list, repr=False)

    def count_agreement(self) -> float:
        """Fraction of off-boundary cells whose predicted count equals the analytic count."""
        m = self.off_boundary
        return float(np.mean(self.pred_count[m] == self.true_count[m])) if m.any() else float("nan")

    def stability_agreement(self) -> float:
        """Fraction of two-solution cells whose predicted signature matches the analytic one."""
        m = self.true_count == 2
        if not m.any():
            return float("nan")
        sig = np.array(self.signature, dtype=object)
        tru = np.array(self.true_signature, dtype=object)
        return float(np.mean(sig[m] == tru[m]))

    @classmethod
    def from_csv(cls, path, counts, omega: Box = GS_OMEGA) -> "PhaseDiagram":
        """Read a diagram written by :meth:`to_csv`; per-cell locate results are not kept."""
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        thetas = np.array([[float(r["f"]), float(r["k"])] for r in rows])
        half = omega.widths / (2 * np.asarray(counts))
        return cls(
            thetas,
            tuple(counts),
            np.array([int(r["pred_count"]) for r in rows]),
            np.array([int(r["true_count"]) for r in rows]),
            [r["signature"] for r in rows],
            [r["true_signature"] for r in rows],
            np.array([not straddles_fold(t, half) for t in thetas]),
            omega,
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["f", "k", "pred_count", "true_count", "signature", "true_signature"])
            for t, p, c, s, ts in zip(self.thetas, self.pred_count, self.true_count, self.signature, self.true_signature):
                w.writerow([repr(float(t[0])), repr(float(t[1])), int(p), int(c), s, ts])


def phase_diagram(locator: Callable, omega: Box = GS_OMEGA, counts=(100, 100), oracle=gray_scott_oracle, workers=1):
    """Run ``locator`` at every cell center of ``omega`` and attach analytic labels."""
    thetas = cell_centers(omega, counts)
    results = _map(locator, list(thetas), workers)
    truth = [oracle(t) for t in thetas]
    half = omega.widths / (2 * np.asarray(counts))
    return PhaseDiagram(
        thetas,
        tuple(counts),
        np.array([r.count for r in results]),
        np.array([len(s) for s, _ in truth]),
        [r.signature() for r in results],
        [true_signature(t, oracle) for t in thetas],
        np.array([not straddles_fold(t, half) for t in thetas]),
        omega,
        results,
    )


def fold_curve(omega: Box = GS_OMEGA, n=400) -> np.ndarray:
    """Points (f, k) on f = 4 (f + k)^2 inside ``omega``: k = sqrt(f)/2 - f."""
    f = np.linspace(omega.lo[0], omega.hi[0], n)[1:]
    k = np.sqrt(f) / 2 - f
    keep = (k > omega.lo[1]) & (k < omega.hi[1])
    return np.stack([f[keep], k[keep]], axis=1)


def stability_curve(omega: Box = GS_OMEGA, n=400) -> np.ndarray:
    """Points on the zero set of the stability margin inside the two-solution region."""
    pts = []
    for f in np.linspace(omega.lo[0], omega.hi[0], n)[1:]:
        k_fold = np.sqrt(f) / 2 - f
        top = min(k_fold - 1e-12, omega.hi[1])
        if top <= omega.lo[1]:
            continue
        g = lambda k: stability_margin((f, k))
        lo = omega.lo[1] + 1e-12
        if g(lo) * g(top) < 0:
            pts.append((f, brentq(g, lo, top, xtol=1e-14)))
    return np.array(pts).reshape(-1, 2)


# -- error tables ------------------------------------------------------------


TABLE_HEADER = ["method", "dataset", "split", "wrong_soln", "distance", "wrong_stb", "wrong_stb_per_solution", "runs"]


def _labels_of(flags):
    return [STABLE if s == 0 else UNSTABLE for s in flags]


def error_metrics(results: Sequence[LocateResult], records, domain: Box) -> dict:
    """wrong-soln, distance and wrong-stb for one run.

    Over the parameters whose count is right: ``distance`` is the mean set
    distance (0 for agreeing empty sets) and ``wrong_stb`` the fraction with any
    mislabeled solution, labels matched to truth by the optimal assignment.
    ``wrong_stb_per_solution`` is the mislabeled fraction of matched solutions.
    """
    if len(results) != len(records):
        raise ContractViolation("one result per record")
    if not records:
        raise ContractViolation("no records to score")
    wrong, dists, bad_params, bad_sols, n_sols = 0, [], 0, 0, 0
    for res, rec in zip(results, records):
        if res.count != rec.count:
            wrong += 1
            continue
        dists.append(set_distance(res.centers, rec.solutions, domain))
        if rec.count == 0:
            continue
        C = np.linalg.norm(res.centers[:, None, :] - rec.solutions[None, :, :], axis=-1)
        rows, cols = linear_sum_assignment(C)
        truth = _labels_of(rec.stability)
        miss = sum(1 for i, j in zip(rows, cols) if res.labels and res.labels[i] != truth[j])
        if not res.labels:
            miss = rec.count
        bad_params += miss > 0
        bad_sols += miss
        n_sols += rec.count
    matched = len(records) - wrong
    return {
        "wrong_soln": wrong / len(records),
        "distance": float(np.mean(dists)) if dists else float("nan"),
        "wrong_stb": bad_params / matched if matched else float("nan"),
        "wrong_stb_per_solution": bad_sols / n_sols if n_sols else float("nan"),
    }


def average_metrics(runs: Sequence[dict]) -> dict:
    keys = ("wrong_soln", "distance", "wrong_stb", "wrong_stb_per_solution")
    out = {k: float(np.nanmean([r[k] for r in runs])) if runs else float("nan") for k in keys}
    out["runs"] = len(runs)
    return out


def evaluate_locator(locator, records, domain: Box, workers=1):
    results = _map(locator, [r.theta for r in records], workers)
    return results, error_metrics(results, records, domain)


def write_error_table(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], float) else r[k]) for k in TABLE_HEADER})


# -- kernel check ------------------------------------------------------------


@dataclass
class KernelCheckReport:
    d_counts: tuple
    omega_counts: tuple
    eigenvalues: np.ndarray
    Ns: list
    trunc_err_sq: list
    tail_sum: list
    decay_exponent: float
    rank: int

    def relative_mismatch(self) -> np.ndarray:
        """|error - tail| relative to the tail, floored at 1e-16 of the trace."""
        e, t = np.asarray(self.trunc_err_sq), np.asarray(self.tail_sum)
        trace = float(self.eigenvalues.clip(min=0).sum())
        return np.abs(e - t) / np.maximum(t, 1e-16 * trace)

    def to_csv(self, eig_path, trunc_path):
        with open(eig_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "lambda"])
            for i, lam in enumerate(self.eigenvalues, start=1):
                w.writerow([i, repr(float(lam))])
        with open(trunc_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "trunc_err_sq", "tail_sum"])
            for n, e, t in zip(self.Ns, self.trunc_err_sq, self.tail_sum):
                w.writerow([n, repr(float(e)), repr(float(t))])


def target_matrix(d_points, thetas, oracle=gray_scott_oracle, cfg: Optional[DeviationConfig] = None, domain: Box = GS_DOMAIN):
    """Phi evaluated at every (U, theta) pair: rows over D points, columns over parameters."""
    cfg = DeviationConfig.for_domain(domain) if cfg is None else cfg
    A = np.zeros((len(d_points), len(thetas)))
    for j, t in enumerate(thetas):
        sols, flags = oracle(t)
        if len(sols):
            A[:, j] = phi(d_points, LabeledSolutionSet.build(t, sols, flags, cfg))
    return A


def decay_exponent(eigenvalues, rel_floor=1e-12) -> tuple:
    """Least-squares slope of log lambda_k on log k over k in [3, rank/2]; returns (slope, rank)."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    rank = int(np.sum(lam > rel_floor * lam[0])) if lam[0] > 0 else 0
    k = np.arange(3, rank // 2 + 1)
    if len(k) < 2:
        return float("nan"), rank
    slope = np.polyfit(np.log(k), np.log(lam[k - 1]), 1)[0]
    return float(slope), rank


def kernel_check(values, d_weight: float, omega_weight: float, Ns=(1, 2, 4, 8, 16), d_counts=(), omega_counts=()):
    """Eigen-decomposition of the discrete kernel of ``values`` (D points x parameters).

    With M = sqrt(w_D) A sqrt(w_Omega), the kernel operator on L2(D) has the
    eigenvalues of M M^T. The rank-N truncation error is computed from an
    explicit reconstruction, independently of the tail sum it is compared with.
    """
    A = np.asarray(values, dtype=np.float64)
    if A.ndim != 2:
        raise ContractViolation("values must be a matrix")
    if max(Ns) > A.shape[0]:
        raise ContractViolation("D grid smaller than the largest truncation rank")
    M = np.sqrt(d_weight * omega_weight) * A
    K = M @ M.T
    try:
        lam, V = np.linalg.eigh(K)
    except np.linalg.LinAlgError as exc:
        raise NumericalDomainError(f"eigendecomposition failed: {exc}") from None
    order = np.argsort(lam)[::-1]
    lam, V = lam[order], V[:, order]
    errs, tails = [], []
    for N in Ns:
        VN = V[:, :N]
        R = M - VN @ (VN.T @ M)
        errs.append(float((R * R).sum()))
        tails.append(float(lam[N:].sum()))
    slope, rank = decay_exponent(lam)
    return KernelCheckReport(tuple(d_counts), tuple(omega_counts), lam, list(Ns), errs, tails, slope, rank)


def gray_scott_kernel_check(d_counts=(61, 61), omega_counts=(41, 41), Ns=(1, 2, 4, 8, 16), cfg=None):
    d_points = cell_centers(GS_DOMAIN, d_counts)
    thetas = cell_centers(GS_OMEGA, omega_counts)
    A = target_matrix(d_points, thetas, cfg=cfg)
    return kernel_check(A, cell_weight(GS_DOMAIN, d_counts), cell_weight(GS_OMEGA, omega_counts), Ns, d_counts, omega_counts)


# -- figures -----------------------------------------------------------------


def _figure(width=6.0, height=4.5):
    from matplotlib.figure import Figure

    return Figure(figsize=(width, height))


def _save_svg(fig, path):
    import matplotlib

    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def emit_svg(obj, path, title=None):
    """Write a phase diagram, kernel report or sweep table as a standalone SVG.

    Output bytes depend only on the data.
    """
    if isinstance(obj, PhaseDiagram):
        _phase_svg(obj, path, title)
    elif isinstance(obj, KernelCheckReport):
        _kernel_svg(obj, path, title)
    elif isinstance(obj, list) and obj and "test_mse" in obj[0]:
        _sweep_svg(obj, path, title)
    else:
        raise ContractViolation("nothing to draw")


def observed_classes(diagram: PhaseDiagram, by="signature") -> list:
    vals = diagram.signature if by == "signature" else list(diagram.pred_count)
    order = SIGNATURES if by == "signature" else range(0, 64)
    present = set(vals)
    return [c for c in order if c in present]


def _boundaries(ax, omega):
    fc = fold_curve(omega)
    ax.plot(fc[:, 0], fc[:, 1], color="black", lw=1.2, label="fold")
    sc = stability_curve(omega)
    if len(sc):
        ax.plot(sc[:, 0], sc[:, 1], color="black", lw=1.2, ls="--", label="stability split")


def _phase_svg(diagram: PhaseDiagram, path, title):
    fig = _figure(9.0, 4.0)
    omega = diagram.omega
    sig = np.array(diagram.signature, dtype=object)
    cnt = np.asarray(diagram.pred_count)
    for i, (by, values) in enumerate((("count", cnt), ("signature", sig))):
        ax = fig.add_subplot(1, 2, i + 1)
        for cls in observed_classes(diagram, by):
            m = values == cls
            ax.scatter(diagram.thetas[m, 0], diagram.thetas[m, 1], s=4, marker="s", c=FIG_COLORS.get(cls, "#000000"),
                       label=f"{cls} solutions" if by == "count" else cls, linewidths=0)
        _boundaries(ax, omega)
        ax.set_xlabel("f")
        ax.set_ylabel("k")
        ax.set_xlim(omega.lo[0], omega.hi[0])
        ax.set_ylim(omega.lo[1], omega.hi[1])
        ax.legend(fontsize=6, loc="upper right", markerscale=2)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save_svg(fig, path)


def _kernel_svg(report: KernelCheckReport, path, title):
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    lam = report.eigenvalues[: max(report.rank, 1)]
    ax.loglog(np.arange(1, len(lam) + 1), np.clip(lam, 1e-300, None), ".", ms=3, label="eigenvalues")
    ax.set_xlabel("k")
    ax.set_ylabel("lambda_k")
    ax.set_title(title or f"decay slope {report.decay_exponent:.2f}")
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)


def _sweep_svg(rows, path, title):
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    groups = {}
    for r in rows:
        groups.setdefault((r["N"], r["W1"], r["W2"]), {}).setdefault(r["L1"], []).append(r["test_mse"])
    for (N, W1, W2), by_depth in sorted(groups.items()):
        d = sorted(by_depth)
        ax.semilogy(d, [np.nanmean(by_depth[x]) for x in d], "o-", label=f"N={N} W1={W1} W2={W2}")
    ax.set_xlabel("depth")
    ax.set_ylabel("test MSE")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, path)


# -- incomplete data ---------------------------------------------------------


def missing_solutions(complete_record, masked_record) -> np.ndarray:
    """Solutions of the complete record with no exact counterpart in the masked one."""
    keep = [
        s for s in complete_record.solutions
        if not any(np.allclose(s, m, rtol=0, atol=1e-12) for m in masked_record.solutions)
    ]
    return np.array(keep).reshape(-1, complete_record.solutions.shape[1])


def recovery_rate(results, complete_records, masked_records, domain: Box, tol=0.05) -> float:
    """Fraction of masked parameters located with their full count and every missing solution within ``tol``."""
    if not results:
        raise ContractViolation("no masked parameters to score")
    ok = 0
    for res, full, part in zip(results, complete_records, masked_records):
        if res.count != full.count:
            continue
        gone = missing_solutions(full, part)
        d = np.linalg.norm(res.centers[:, None, :] - gone[None, :, :], axis=-1).min(axis=0) / domain.diameter
        ok += bool(np.all(d <= tol))
    return ok / len(results)
