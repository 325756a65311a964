"""Minibatch ADAM training of a PSNN on the mean-squared-error loss."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dataset import TrainingSet
from .errors import ConfigurationError, DivergedTrainingError
from .network import PsnnModel, eta_for_targets, psnn_backward, psnn_forward
from .numerics import RandomSource

log = logging.getLogger(__name__)

SWEEP_HEADER = ["N", "L1", "W1", "L2", "W2", "seed", "test_mse", "seconds"]


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    group_size: int = 8

    def __post_init__(self):
        if self.group_size < 1:
            raise ConfigurationError("group size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("ADAM betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be positive")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@dataclass
class LossReport:
    epoch_loss: list = field(default_factory=list)
    test_mse: float = float("nan")
    seconds: float = 0.0
    warnings: list = field(default_factory=list)


def loss(model: PsnnModel, data: TrainingSet, chunk: int = 65536) -> float:
    """Mean squared error of the model over every sample in ``data``."""
    if len(data) == 0:
        raise ConfigurationError("loss over an empty set")
    total = 0.0
    for start in range(0, len(data), chunk):
        sl = slice(start, start + chunk)
        r = psnn_forward(model, data.U[sl], data.theta[sl]) - data.target[sl]
        total += float(np.dot(r, r))
    return total / len(data)


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """Bias-corrected ADAM update applied in place; returns ``(params, state)``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    step = cfg.learning_rate * np.sqrt(c2) / c1
    eps_hat = cfg.eps * np.sqrt(c2)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= step * m / (np.sqrt(v) + eps_hat)
    if not all(np.all(np.isfinite(p)) for p in params):
        raise DivergedTrainingError("non-finite weights after ADAM step")
    return params, state


def grouped_order(record, group_size, rng: RandomSource) -> np.ndarray:
    """Random sample order in which runs of ``group_size`` samples share a record.

    Samples are shuffled within each record, cut into chunks of ``group_size``,
    and the chunks are shuffled globally. With ``group_size == 1`` this is a
    plain permutation.
    """
    n = len(record)
    perm = rng.permutation(n)
    if group_size == 1:
        return perm
    rec = record[perm]
    by_record = np.argsort(rec, kind="stable")
    sorted_rec = rec[by_record]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_rec)) + 1]
    rank = np.arange(n) - np.repeat(starts, np.diff(np.r_[starts, n]))
    chunk_id = sorted_rec * (n // group_size + 1) + rank // group_size
    _, chunk = np.unique(chunk_id, return_inverse=True)
    chunk_rank = rng.permutation(chunk.max() + 1)[chunk]
    return perm[by_record[np.lexsort((rank, chunk_rank))]]


def _moving_average(x, w=5):
    x = np.asarray(x, dtype=np.float64)
    if len(x) < w:
        return x
    return np.convolve(x, np.ones(w) / w, mode="valid")


def convergence_warning(epoch_loss) -> Optional[str]:
    """Flag training whose smoothed loss rose across the final tenth of the epochs."""
    n = len(epoch_loss)
    tail = epoch_loss[n - max(n // 10, 1):]
    ma = _moving_average(tail)
    if len(ma) >= 2 and ma[-1] > ma[0]:
        return f"loss did not decrease over the last {len(tail)} epochs ({ma[0]:.3e} -> {ma[-1]:.3e})"
    return None


def train(
    model: PsnnModel,
    train_set: TrainingSet,
    test_set: Optional[TrainingSet],
    cfg: TrainConfig,
    *,
    set_eta: bool = True,
    callback: Optional[Callable[[int, float], None]] = None,
):
    """Run ``cfg.epochs`` epochs of shuffled minibatch ADAM.

    For the solution channel ``eta`` is reset from the training targets first
    (unless ``set_eta`` is off). Each epoch's shuffle is keyed by
    ``(cfg.seed, epoch)``, so training is a pure function of its inputs.
    """
    if len(train_set) == 0:
        raise ConfigurationError("empty training set")
    if train_set.channel != model.channel:
        raise ConfigurationError(f"training data is for the {train_set.channel} channel, model is {model.channel}")
    if set_eta and model.channel == "solution":
        model.eta = eta_for_targets(train_set.target)
    params = model.parameters()
    state = AdamState.zeros_like(params)
    report = LossReport()
    n = len(train_set)
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = grouped_order(train_set.record, cfg.group_size, RandomSource.child(cfg.seed, epoch))
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, first, inv = np.unique(train_set.record[idx], return_index=True, return_inverse=True)
            try:
                value, grads = psnn_backward(
                    model, train_set.U[idx], train_set.theta[idx[first]], train_set.target[idx], inv.ravel()
                )
                adam_step(params, grads.flat(), state, cfg)
            except DivergedTrainingError as exc:
                report.seconds = time.perf_counter() - started
                raise DivergedTrainingError(f"epoch {epoch}: {exc}", report) from None
            running += value * len(idx)
        report.epoch_loss.append(running / n)
        if callback is not None:
            callback(epoch, report.epoch_loss[-1])
    report.seconds = time.perf_counter() - started
    if test_set is not None and len(test_set):
        report.test_mse = loss(model, test_set)
    warning = convergence_warning(report.epoch_loss)
    if warning:
        report.warnings.append(warning)
        log.warning(warning)
    model.metadata.update(
        {
            "seed": cfg.seed,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "data_digest": train_set.digest(),
            "final_train_loss": report.epoch_loss[-1],
        }
    )
    return model, report


@dataclass(frozen=True)
class SweepCell:
    N: int
    L1: int
    W1: int
    L2: int
    W2: int


def depth_grid(Ns=(2, 4, 8), depths=range(1, 7), W1=30, W2=20) -> list:
    """Cells with both nets at the same depth, fixed widths."""
    return [SweepCell(N, L, W1, L, W2) for N in Ns for L in depths]


def convergence_sweep(cells, seeds, train_set: TrainingSet, test_set: TrainingSet, cfg: TrainConfig, out_path=None):
    """Train one model per (cell, seed) and collect test errors.

    A cell that fails is recorded with ``test_mse = nan`` and the sweep continues.
    """
    rows = []
    n_params, n_sol = train_set.theta.shape[1], train_set.U.shape[1]
    for cell in cells:
        for seed in seeds:
            model = PsnnModel.create(n_params, n_sol, cell.N, cell.L1, cell.W1, cell.L2, cell.W2, train_set.channel, seed=seed)
            run_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
            t0 = time.perf_counter()
            try:
                _, report = train(model, train_set, test_set, run_cfg)
                mse = report.test_mse
            except DivergedTrainingError as exc:
                log.warning("cell %s seed %s failed: %s", cell, seed, exc)
                mse = float("nan")
            rows.append({**cell.__dict__, "seed": seed, "test_mse": mse, "seconds": time.perf_counter() - t0})
            if out_path is not None:
                write_sweep_csv(rows, out_path)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in SWEEP_HEADER})


def mean_by_cell(rows) -> dict:
    acc = {}
    for r in rows:
        acc.setdefault((r["N"], r["L1"], r["W1"], r["L2"], r["W2"]), []).append(r["test_mse"])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def depth_trends(rows, N_hi=8, N_lo=2, min_depth=3) -> dict:
    """Ordinal checks on a depth sweep: N_hi beats N_lo at depth >= min_depth; MSE falls with depth at N_hi."""
    means = mean_by_cell(rows)
    by_N = {}
    for (N, L1, W1, L2, W2), v in means.items():
        if L1 == L2:
            by_N.setdefault(N, {})[L1] = v
    hi, lo = by_N.get(N_hi, {}), by_N.get(N_lo, {})
    deep = sorted(d for d in hi if d in lo and d >= min_depth)
    hi_depths = sorted(hi)
    return {
        "N_beats": bool(deep) and all(hi[d] < lo[d] for d in deep),
        "depth_decreases": len(hi_depths) >= 2 and hi[hi_depths[-1]] < hi[hi_depths[0]],
        "deepest_mse": hi[hi_depths[-1]] if hi_depths else float("nan"),
        "by_N": by_N,
    }


def loglog_slope(weights, errors) -> float:
    w, e = np.log(np.asarray(weights, float)), np.log(np.asarray(errors, float))
    if len(w) < 2:
        return float("nan")
    return float(np.polyfit(w, e, 1)[0])


def width_trends(rows, base: SweepCell) -> dict:
    """Slopes of log MSE against log weight count for the two width families around ``base``.

    Solution widening wins when its slope is the steeper (more negative) one.
    """
    from .network import MlpSpec

    means = mean_by_cell(rows)

    def n_weights(N, L1, W1, L2, W2):
        return MlpSpec(2, L1, W1, N).n_weights + MlpSpec(2, L2, W2, N).n_weights

    sol = sorted((n_weights(*k), v) for k, v in means.items() if (k[0], k[1], k[2], k[3]) == (base.N, base.L1, base.W1, base.L2))
    par = sorted((n_weights(*k), v) for k, v in means.items() if (k[0], k[1], k[3], k[4]) == (base.N, base.L1, base.L2, base.W2))
    s_sol = loglog_slope(*zip(*sol)) if len(sol) >= 2 else float("nan")
    s_par = loglog_slope(*zip(*par)) if len(par) >= 2 else float("nan")
    return {"solution_slope": s_sol, "parameter_slope": s_par, "solution_faster": bool(s_sol < s_par)}
