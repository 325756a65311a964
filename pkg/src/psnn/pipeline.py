"""End-to-end steps wired to a :class:`RunConfig`: data files, checkpoints, cut values, reports.

Trained models and cut values are cached on disk next to a digest of the
configuration that produced them, so repeated commands reuse earlier work
and a changed setting triggers recomputation.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import (
    ObservationSet,
    SamplingPlan,
    build_training_set,
    generate_observations,
    load_observations,
    mask_incomplete,
    masked_indices,
    save_observations,
)
from .errors import ConfigurationError, MissingInputError, ParseError
from .evaluate import (
    MeanShiftLocator,
    PhaseDiagram,
    PsnnLocator,
    average_metrics,
    error_metrics,
    gray_scott_kernel_check,
    phase_diagram,
    recovery_rate,
    write_error_table,
)
from .locate import (
    ClusterParams,
    CutSearchConfig,
    CutSearchResult,
    GridSpec,
    MeanShiftParams,
    _map,
    cut_search,
    meanshift_cut_search,
)
from .network import PsnnModel, load_checkpoint, save_checkpoint
from .system import SYSTEMS, fold_margin
from .target import DeviationConfig
from .training import SweepCell, TrainConfig, convergence_sweep, depth_grid, train

log = logging.getLogger(__name__)

DATASETS = ("complete", "incomplete")
MODEL_SECTIONS = ("data", "deviation", "sampling", "network", "train")
# complete-data models and sweeps do not depend on this field
INCOMPLETE_ONLY = "sampling.incomplete_mode"


def sample_seed(seed: int, role: int) -> int:
    """Seed for the training-sample draw of run ``seed``; ``role`` separates train from test points."""
    return int(np.random.SeedSequence([seed, role]).generate_state(1)[0])


class Pipeline:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.system, self.oracle = SYSTEMS[cfg.system]
        self.domain = self.system.solution_box
        self.omega = self.system.parameter_box
        self.data_dir = Path(cfg.paths.data_dir)
        self.ckpt_dir = Path(cfg.paths.checkpoint_dir)
        self.out_dir = Path(cfg.paths.output_dir)

    # -- settings ------------------------------------------------------------

    @property
    def deviation(self) -> DeviationConfig:
        d = self.cfg.deviation
        return DeviationConfig.for_domain(self.domain, d.delta0, d.delta1_fraction, d.neighbors)

    @property
    def plan(self) -> SamplingPlan:
        """Sampling plan of the complete variant and of every test set."""
        s = dataclasses.asdict(self.cfg.sampling)
        s.pop("incomplete_mode")
        return SamplingPlan(**s)

    def train_plan(self, dataset: str) -> SamplingPlan:
        if dataset == "incomplete":
            return dataclasses.replace(self.plan, mode=self.cfg.sampling.incomplete_mode)
        return self.plan

    @property
    def cluster(self) -> ClusterParams:
        return ClusterParams(**dataclasses.asdict(self.cfg.cluster))

    @property
    def cut_config(self) -> CutSearchConfig:
        c = self.cfg.locate
        return CutSearchConfig(c.cut_lo, c.cut_hi, c.cut_count)

    @property
    def grid(self) -> np.ndarray:
        return GridSpec(tuple(self.cfg.locate.grid)).points(self.domain)

    def meanshift_params(self, L_cut=0.5) -> MeanShiftParams:
        m = self.cfg.meanshift
        return MeanShiftParams(
            m.gamma_p_fraction * self.omega.diameter, m.gamma_s_fraction * self.domain.diameter,
            L_cut, m.eps_tol, m.n_initial, m.max_iter,
        )

    def train_config(self, seed: int, epochs=None) -> TrainConfig:
        t = dataclasses.asdict(self.cfg.train)
        t["seed"] = seed
        if epochs is not None:
            t["epochs"] = epochs
        return TrainConfig(**t)

    # -- data ----------------------------------------------------------------

    def obs_path(self, dataset: str) -> Path:
        if dataset not in DATASETS:
            raise ConfigurationError(f"unknown dataset {dataset!r}; expected one of {DATASETS}")
        return self.data_dir / f"observations-{dataset}.jsonl"

    def generate_data(self, mask: bool = False, mask_count=None) -> list:
        d = self.cfg.data
        obs = generate_observations(self.oracle, self.omega, self.domain, d.n_train, d.n_search, d.n_test, d.seed, fold_margin)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        written = [self.obs_path("complete")]
        save_observations(obs, written[0])
        if mask:
            masked = mask_incomplete(obs, d.mask if mask_count is None else mask_count, seed=d.seed + 1)
            written.append(self.obs_path("incomplete"))
            save_observations(masked, written[1])
        return written

    def observations(self, dataset: str) -> ObservationSet:
        path = self.obs_path(dataset)
        if not path.is_file():
            hint = " (run gen-data --mask first)" if dataset == "incomplete" else " (run gen-data first)"
            raise MissingInputError(f"observation file not found: {path}{hint}")
        return load_observations(path)

    def ensure_data(self):
        """Generate observation files if absent or produced by a different data config."""
        stamp = self.data_dir / "data.digest"
        key = self.cfg.digest("data")
        fresh = stamp.is_file() and stamp.read_text().strip() == key
        if not (fresh and all(self.obs_path(d).is_file() for d in DATASETS)):
            self.generate_data(mask=True)
            stamp.write_text(key + "\n")

    def training_sets(self, dataset: str, channel: str, seed: int):
        obs = self.observations(dataset)
        train_set = build_training_set(
            obs, self.train_plan(dataset), channel, self.deviation, sample_seed(seed, 1), "train", estimate_deviation=dataset == "incomplete"
        )
        test_set = build_training_set(self.observations("complete"), self.plan, channel, self.deviation, sample_seed(seed, 2), "test")
        return train_set, test_set

    # -- models --------------------------------------------------------------

    def checkpoint_path(self, dataset: str, channel: str, seed: int) -> Path:
        return self.ckpt_dir / f"{dataset}-{channel}-s{seed}.json"

    def model_key(self, dataset: str, channel: str, seed: int) -> str:
        drop = () if dataset == "incomplete" else (INCOMPLETE_ONLY,)
        return f"{self.cfg.digest(*MODEL_SECTIONS, drop=drop)}:{dataset}:{channel}:{seed}"

    def load_model(self, dataset: str, channel: str, seed: int) -> PsnnModel:
        path = self.checkpoint_path(dataset, channel, seed)
        if not path.is_file():
            raise MissingInputError(f"checkpoint not found: {path} (run train --channel {channel})")
        return load_checkpoint(path)

    def train_model(self, dataset: str, channel: str, seed: int, reuse: bool = True):
        """Train (or reuse a checkpoint with a matching config digest); returns (model, report or None)."""
        path = self.checkpoint_path(dataset, channel, seed)
        key = self.model_key(dataset, channel, seed)
        if reuse and path.is_file():
            try:
                model = load_checkpoint(path)
                if model.metadata.get("key") == key:
                    return model, None
            except ParseError:
                log.warning("unreadable checkpoint %s; retraining", path)
        train_set, test_set = self.training_sets(dataset, channel, seed)
        n = self.cfg.network
        model = PsnnModel.create(self.omega.dim, self.domain.dim, n.N, n.L1, n.W1, n.L2, n.W2, channel, seed=seed)
        log.info("training %s/%s seed %d on %d samples", dataset, channel, seed, len(train_set))
        model, report = train(model, train_set, test_set, self.train_config(seed))
        model.metadata.update({"key": key, "dataset": dataset, "test_mse": report.test_mse})
        save_checkpoint(model, path)
        self._write_loss(path, report)
        return model, report

    def _write_loss(self, path: Path, report):
        with open(path.with_suffix(".loss.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss"])
            for i, v in enumerate(report.epoch_loss):
                w.writerow([i, repr(float(v))])
        meta = {"seconds": report.seconds, "test_mse": report.test_mse, "warnings": report.warnings}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=1) + "\n")

    def models(self, dataset: str, seed: int, train_missing: bool = True):
        get = self.train_model if train_missing else (lambda d, c, s: (self.load_model(d, c, s), None))
        return get(dataset, "solution", seed)[0], get(dataset, "stability", seed)[0]

    # -- locating ------------------------------------------------------------

    def cut_path(self, dataset: str, seed: int) -> Path:
        return self.out_dir / f"cut-{dataset}-s{seed}.csv"

    def cut_value(self, dataset: str, seed: int, model=None, reuse: bool = True) -> CutSearchResult:
        """Cut value for one trained model; cached beside a digest of everything it depends on."""
        path = self.cut_path(dataset, seed)
        stamp = path.with_suffix(".key")
        key = f"{self.model_key(dataset, 'solution', seed)}:{self.cfg.digest('cluster', 'locate')}"
        if reuse and path.is_file() and stamp.is_file() and stamp.read_text().strip() == key:
            with open(path) as fh:
                rows = list(csv.DictReader(fh))
            cuts = np.array([float(r["L_cut"]) for r in rows])
            errs = np.array([float(r["average_error"]) for r in rows])
            return CutSearchResult(float(cuts[int(np.flatnonzero(errs == errs.min())[0])]), cuts, errs)
        model = self.train_model(dataset, "solution", seed)[0] if model is None else model
        search = self.observations("complete").split("search")
        result = cut_search(model, search, self.grid, self.domain, self.cut_config, self.cluster, self.cfg.workers)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        result.to_csv(path)
        stamp.write_text(key + "\n")
        return result

    def locator(self, dataset: str, seed: int, train_missing: bool = True, L_cut=None) -> PsnnLocator:
        sol, stab = self.models(dataset, seed, train_missing)
        cut = self.cut_value(dataset, seed, sol).cut if L_cut is None else L_cut
        return PsnnLocator(sol, stab, self.grid, cut, self.cluster)

    def meanshift_locator(self, dataset: str, seed: int) -> MeanShiftLocator:
        obs = self.observations(dataset)
        est = dataset == "incomplete"
        plan = self.train_plan(dataset)
        sol = build_training_set(obs, plan, "solution", self.deviation, sample_seed(seed, 1), "train", est)
        stab = build_training_set(obs, plan, "stability", self.deviation, sample_seed(seed, 1), "train", est)
        search = self.observations("complete").split("search")
        cs = meanshift_cut_search(sol, search, self.meanshift_params(), self.domain, self.cut_config, self.cluster, seed, self.cfg.workers)
        return MeanShiftLocator(sol, self.meanshift_params(cs.cut), self.domain, self.cluster, stab, seed)

    # -- evaluation ----------------------------------------------------------

    def lost_records(self):
        """Complete-truth records for the training parameters that were masked."""
        complete = self.observations("complete")
        return [complete.records[i] for i in masked_indices(self.observations("incomplete"))]

    def _stamp_matches(self, path: Path, key: str) -> bool:
        stamp = path.with_suffix(".key")
        return path.is_file() and stamp.is_file() and stamp.read_text().strip() == key

    def _eval_key(self, runs, *extra) -> str:
        models = [self.model_key(d, c, s) for s in runs for d in DATASETS for c in ("solution", "stability")]
        return ":".join([self.cfg.digest("cluster", "locate", "meanshift")] + models + [str(x) for x in extra])

    def error_table(self, runs=None, methods=("psnn", "mean-shift"), reuse: bool = True) -> list:
        """Error-table rows averaged over ``runs``; cached in ``error_table.csv`` with a key stamp."""
        runs = list(self.cfg.evaluate.runs if runs is None else runs)
        path = self.out_dir / "error_table.csv"
        key = self._eval_key(runs, *methods)
        if reuse and self._stamp_matches(path, key):
            with open(path) as fh:
                text = ("method", "dataset", "split")
                return [{k: (v if k in text else int(v) if k == "runs" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
        test = self.observations("complete").split("test")
        lost = self.lost_records()
        cells = [("complete", "random", test), ("incomplete", "random", test), ("incomplete", "lost-data", lost)]
        rows = []
        for method in methods:
            for dataset, split, records in cells:
                per_run = []
                for seed in runs:
                    loc = self.locator(dataset, seed) if method == "psnn" else self.meanshift_locator(dataset, seed)
                    results = _map(loc, [r.theta for r in records], self.cfg.workers)
                    per_run.append(error_metrics(results, records, self.domain))
                    log.info("%s/%s/%s seed %d: %s", method, dataset, split, seed, per_run[-1])
                rows.append({"method": method, "dataset": dataset, "split": split, **average_metrics(per_run)})
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_error_table(rows, path)
        path.with_suffix(".key").write_text(key + "\n")
        return rows

    def recovery(self, seed: int, tol: float = 0.05) -> float:
        loc = self.locator("incomplete", seed)
        lost = self.lost_records()
        masked = [self.observations("incomplete").records[i] for i in masked_indices(self.observations("incomplete"))]
        results = _map(loc, [r.theta for r in lost], self.cfg.workers)
        return recovery_rate(results, lost, masked, self.domain, tol)

    def recovery_rates(self, runs=None, tol: float = 0.05, reuse: bool = True) -> list:
        """Recovery rate per seed in ``runs``; cached in ``recovery.csv``."""
        runs = list(self.cfg.evaluate.runs if runs is None else runs)
        path = self.out_dir / "recovery.csv"
        key = self._eval_key(runs, tol)
        if reuse and self._stamp_matches(path, key):
            with open(path) as fh:
                return [float(r["recovery_rate"]) for r in csv.DictReader(fh)]
        rates = [self.recovery(seed, tol) for seed in runs]
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "recovery_rate"])
            for seed, r in zip(runs, rates):
                w.writerow([seed, repr(float(r))])
        path.with_suffix(".key").write_text(key + "\n")
        return rates

    def phase_path(self, dataset: str, seed: int) -> Path:
        return self.out_dir / f"phase-{dataset}-s{seed}.csv"

    def phase_diagram(self, dataset: str, seed: int, train_missing: bool = True, reuse: bool = True):
        """Phase diagram of one trained pair; cached as its CSV with a key stamp."""
        counts = tuple(self.cfg.evaluate.phase_grid)
        path = self.phase_path(dataset, seed)
        key = ":".join([self.model_key(dataset, c, seed) for c in ("solution", "stability")]
                       + [self.cfg.digest("cluster", "locate", "evaluate")])
        if reuse and self._stamp_matches(path, key):
            return PhaseDiagram.from_csv(path, counts, self.omega)
        loc = self.locator(dataset, seed, train_missing)
        diagram = phase_diagram(loc, self.omega, counts, self.oracle, self.cfg.workers)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        diagram.to_csv(path)
        path.with_suffix(".key").write_text(key + "\n")
        return diagram

    def kernel_check(self):
        e = self.cfg.evaluate
        return gray_scott_kernel_check(tuple(e.kernel_d_grid), tuple(e.kernel_omega_grid), tuple(e.kernel_ranks), self.deviation)

    # -- convergence sweeps --------------------------------------------------

    def sweep_cells(self, smoke: bool = False) -> list:
        s, n = self.cfg.sweep, self.cfg.network
        if smoke:
            return depth_grid(s.smoke_Ns, s.smoke_depths, n.W1, n.W2)
        cells = depth_grid(s.Ns, s.depths, n.W1, n.W2)
        cells += width_cells(s.widths, n)
        seen, out = set(), []
        for c in cells:
            if c not in seen:
                seen.add(c)
                out.append(c)
        return out

    def sweep_path(self, smoke: bool = False) -> Path:
        return self.out_dir / ("sweep-smoke.csv" if smoke else "sweep.csv")

    def sweep(self, smoke: bool = False, out_path=None, reuse: bool = True) -> list:
        """Sweep rows, read back from ``out_path`` when its key stamp matches the configuration."""
        s = self.cfg.sweep
        path = Path(out_path) if out_path is not None else self.sweep_path(smoke)
        stamp = path.with_suffix(".key")
        key = f"{self.cfg.digest(*MODEL_SECTIONS, 'sweep', drop=(INCOMPLETE_ONLY,))}:{'smoke' if smoke else 'full'}"
        if reuse and path.is_file() and stamp.is_file() and stamp.read_text().strip() == key:
            with open(path) as fh:
                rows = [{k: (float(v) if k in ("test_mse", "seconds") else int(v)) for k, v in r.items()} for r in csv.DictReader(fh)]
            if len(rows) == len(self.sweep_cells(smoke)) * len(s.seeds):
                return rows
        train_set, test_set = self.training_sets("complete", "solution", self.cfg.train.seed)
        cfg = self.train_config(0, s.smoke_epochs if smoke else s.epochs)
        path.parent.mkdir(parents=True, exist_ok=True)
        stamp.unlink(missing_ok=True)
        rows = convergence_sweep(self.sweep_cells(smoke), list(s.seeds), train_set, test_set, cfg, path)
        stamp.write_text(key + "\n")
        return rows


def width_cells(widths, n) -> list:
    """Two families around the default architecture: solution net widened, parameter net widened."""
    return [SweepCell(n.N, n.L1, n.W1, n.L2, w) for w in widths] + [SweepCell(n.N, n.L1, w, n.L2, n.W2) for w in widths]
