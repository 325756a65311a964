"""Run configuration: nested sections loaded from YAML, flags applied on top."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError


@dataclass
class PathsSection:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"


@dataclass
class DataSection:
    n_train: int = 1000
    n_search: int = 100
    n_test: int = 600
    mask: int = 120
    seed: int = 0


@dataclass
class DeviationSection:
    delta0: float = 0.01
    delta1_fraction: float = 0.1
    neighbors: int = 8


@dataclass
class SamplingSection:
    mode: str = "uniform"
    n_random: int = 200
    radius_multiplier: float = 2.0
    points_per_solution: int = 100
    shared: bool = False
    incomplete_mode: str = "concentrated"


@dataclass
class NetworkSection:
    N: int = 8
    L1: int = 4
    W1: int = 30
    L2: int = 3
    W2: int = 20


@dataclass
class TrainSection:
    epochs: int = 300
    batch_size: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    group_size: int = 8
    seed: int = 0


@dataclass
class ClusterSection:
    c_max: int = 5
    sil1: float = 0.38
    restarts: int = 10
    max_iter: int = 100
    tol: float = 1e-6
    silhouette_sample: int = 2000
    seed: int = 0


@dataclass
class LocateSection:
    grid: list = field(default_factory=lambda: [101, 101])
    cut_lo: float = 0.3
    cut_hi: float = 0.9
    cut_count: int = 11


@dataclass
class MeanShiftSection:
    gamma_p_fraction: float = 0.02
    gamma_s_fraction: float = 0.1
    eps_tol: float = 1e-4
    n_initial: int = 50
    max_iter: int = 500


@dataclass
class EvaluateSection:
    runs: list = field(default_factory=lambda: [0, 1, 2])
    phase_grid: list = field(default_factory=lambda: [100, 100])
    kernel_d_grid: list = field(default_factory=lambda: [61, 61])
    kernel_omega_grid: list = field(default_factory=lambda: [41, 41])
    kernel_ranks: list = field(default_factory=lambda: [1, 2, 4, 8, 16])


@dataclass
class SweepSection:
    Ns: list = field(default_factory=lambda: [2, 4, 8])
    depths: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    widths: list = field(default_factory=lambda: [5, 10, 20, 40])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 300
    smoke_Ns: list = field(default_factory=lambda: [2, 8])
    smoke_depths: list = field(default_factory=lambda: [1, 3])
    smoke_epochs: int = 100


HELP = {
    "paths.data_dir": "observation files",
    "paths.checkpoint_dir": "trained network checkpoints",
    "paths.output_dir": "CSV and SVG outputs",
    "data.n_train": "training parameters",
    "data.n_search": "parameters held out for the cut search",
    "data.n_test": "random test parameters",
    "data.mask": "training records that lose one solution in the incomplete variant",
    "data.seed": "parameter sampling seed",
    "deviation.delta0": "floor on the bump width delta",
    "deviation.delta1_fraction": "single-solution width delta1 as a fraction of diam(D)",
    "deviation.neighbors": "neighbours used to estimate delta for incomplete records",
    "sampling.mode": "uniform or concentrated extra points per record",
    "sampling.n_random": "uniform extra points per record",
    "sampling.radius_multiplier": "ball radius in units of delta (concentrated mode)",
    "sampling.points_per_solution": "ball points per observed solution (concentrated mode)",
    "sampling.shared": "reuse one uniform point set for every record",
    "sampling.incomplete_mode": "sampling mode for the incomplete variant's training set (mode applies to the complete one)",
    "network.N": "inner-product dimension shared by the two nets",
    "network.L1": "parameter-net hidden layers",
    "network.W1": "parameter-net width",
    "network.L2": "solution-net hidden layers",
    "network.W2": "solution-net width",
    "train.epochs": "ADAM epochs",
    "train.batch_size": "minibatch size",
    "train.learning_rate": "ADAM step size",
    "train.beta1": "ADAM first-moment decay",
    "train.beta2": "ADAM second-moment decay",
    "train.eps": "ADAM denominator offset",
    "train.group_size": "consecutive shuffled samples drawn from one record",
    "train.seed": "weight initialisation and shuffling seed",
    "cluster.c_max": "largest cluster count tried",
    "cluster.sil1": "silhouette needed to accept more than one cluster",
    "cluster.restarts": "K-means restarts",
    "cluster.max_iter": "Lloyd iterations per restart",
    "cluster.tol": "relative inertia change that stops Lloyd iterations",
    "cluster.silhouette_sample": "largest point set scored exactly by the silhouette",
    "cluster.seed": "K-means seeding seed",
    "locate.grid": "points per axis of the solution grid on D",
    "locate.cut_lo": "smallest cut value searched",
    "locate.cut_hi": "largest cut value searched",
    "locate.cut_count": "evenly spaced cut values searched",
    "meanshift.gamma_p_fraction": "parameter window as a fraction of diam(Omega)",
    "meanshift.gamma_s_fraction": "solution window as a fraction of diam(D)",
    "meanshift.eps_tol": "movement below which a start has converged",
    "meanshift.n_initial": "random starts per parameter",
    "meanshift.max_iter": "iteration cap per start",
    "evaluate.runs": "training seeds averaged in the error table",
    "evaluate.phase_grid": "cells per axis of the phase diagram over Omega",
    "evaluate.kernel_d_grid": "kernel check cells per axis on D",
    "evaluate.kernel_omega_grid": "kernel check cells per axis on Omega",
    "evaluate.kernel_ranks": "truncation ranks checked",
    "sweep.Ns": "inner-product dimensions in the depth sweep",
    "sweep.depths": "depths (both nets) in the depth sweep",
    "sweep.widths": "widths in the width sweep",
    "sweep.seeds": "seeds per sweep cell",
    "sweep.epochs": "epochs per sweep model",
    "sweep.smoke_Ns": "inner-product dimensions in the smoke sweep",
    "sweep.smoke_depths": "depths in the smoke sweep",
    "sweep.smoke_epochs": "epochs per smoke sweep model",
}


@dataclass
class RunConfig:
    system: str = "gray-scott"
    workers: int = 1
    paths: PathsSection = field(default_factory=PathsSection)
    data: DataSection = field(default_factory=DataSection)
    deviation: DeviationSection = field(default_factory=DeviationSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    locate: LocateSection = field(default_factory=LocateSection)
    meanshift: MeanShiftSection = field(default_factory=MeanShiftSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self, *sections, drop=()) -> str:
        """Short hash of the named sections (all of them when none are named).

        ``drop`` lists dotted fields left out, for results that do not depend on them.
        """
        d = self.to_dict()
        picked = {k: d[k] for k in sections} if sections else d
        for name in drop:
            section, key = name.split(".")
            picked.get(section, {}).pop(key, None)
        return hashlib.sha256(json.dumps(picked, sort_keys=True).encode()).hexdigest()[:16]

    def resolve(self, base: Path) -> "RunConfig":
        """Copy with relative paths anchored at ``base``."""
        paths = PathsSection(**{k: str((base / v) if not Path(v).is_absolute() else Path(v)) for k, v in dataclasses.asdict(self.paths).items()})
        return dataclasses.replace(self, paths=paths)


def _coerce(name, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not value:
            raise ConfigurationError(f"{name}: expected a nonempty list, got {value!r}")
        if default and isinstance(default[0], int) and not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigurationError(f"{name}: expected a list of integers, got {value!r}")
        return list(value)
    return value


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{prefix or 'config'}: expected a mapping")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigurationError(f"unknown config field {prefix}{unknown[0]}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        default = getattr(defaults, f.name)
        name = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), raw[f.name] or {}, name + ".")
        else:
            kwargs[f.name] = _coerce(name, raw[f.name], default)
    return cls(**kwargs)


def validate(cfg: RunConfig) -> RunConfig:
    """Range checks that a type check cannot express; errors name the field."""
    checks = [
        ("system", cfg.system == "gray-scott", "only 'gray-scott' is available"),
        ("workers", cfg.workers >= 1, "must be at least 1"),
        ("data.n_train", cfg.data.n_train > 0, "must be positive"),
        ("data.n_search", cfg.data.n_search > 0, "must be positive"),
        ("data.n_test", cfg.data.n_test > 0, "must be positive"),
        ("data.mask", 0 <= cfg.data.mask <= cfg.data.n_train, "must lie in [0, n_train]"),
        ("deviation.delta0", cfg.deviation.delta0 > 0, "must be positive"),
        ("deviation.delta1_fraction", cfg.deviation.delta1_fraction > 0, "must be positive"),
        ("deviation.neighbors", cfg.deviation.neighbors >= 1, "must be at least 1"),
        ("sampling.mode", cfg.sampling.mode in ("uniform", "concentrated"), "must be uniform or concentrated"),
        ("sampling.incomplete_mode", cfg.sampling.incomplete_mode in ("uniform", "concentrated"), "must be uniform or concentrated"),
        ("sampling.n_random", cfg.sampling.n_random > 0, "must be positive"),
        ("train.epochs", cfg.train.epochs > 0, "must be positive"),
        ("train.batch_size", cfg.train.batch_size > 0, "must be positive"),
        ("train.learning_rate", cfg.train.learning_rate > 0, "must be positive"),
        ("cluster.c_max", cfg.cluster.c_max >= 2, "must be at least 2"),
        ("cluster.sil1", 0 < cfg.cluster.sil1 < 1, "must lie in (0, 1)"),
        ("locate.grid", all(c >= 2 for c in cfg.locate.grid), "needs at least 2 points per axis"),
        ("locate.cut_lo", 0 <= cfg.locate.cut_lo < cfg.locate.cut_hi <= 1, "need 0 <= cut_lo < cut_hi <= 1"),
        ("locate.cut_count", cfg.locate.cut_count >= 1, "must be at least 1"),
        ("meanshift.n_initial", cfg.meanshift.n_initial >= 1, "must be at least 1"),
        ("evaluate.kernel_ranks", max(cfg.evaluate.kernel_ranks) <= _prod(cfg.evaluate.kernel_d_grid), "exceeds the D grid size"),
    ]
    for section in ("network",):
        for k, v in dataclasses.asdict(getattr(cfg, section)).items():
            checks.append((f"{section}.{k}", v >= 1, "must be at least 1"))
    for name, ok, why in checks:
        if not ok:
            raise ConfigurationError(f"{name}: {why}")
    return cfg


def _prod(xs):
    out = 1
    for x in xs:
        out *= x
    return out


def from_dict(raw: dict) -> RunConfig:
    return validate(_build(RunConfig, raw or {}, ""))


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{p}: not valid YAML ({exc})") from None
    return from_dict(raw or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def iter_fields(cfg: RunConfig = None):
    """(dotted name, default value, help) for every leaf field."""
    cfg = RunConfig() if cfg is None else cfg
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                name = f"{f.name}.{g.name}"
                yield name, getattr(value, g.name), HELP.get(name, "")
        else:
            yield f.name, value, {"system": "system to study", "workers": "worker processes"}.get(f.name, "")


def set_field(cfg: RunConfig, dotted: str, value: Any) -> RunConfig:
    """Copy of ``cfg`` with one leaf replaced (used for command-line overrides)."""
    raw = cfg.to_dict()
    node = raw
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value
    return from_dict(raw)
