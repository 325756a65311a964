"""Observation sets, incomplete-data masking and training-sample assembly."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Optional

import numpy as np

from .errors import ConfigurationError, ContractViolation, ParseError
from .numerics import RandomSource
from .system import BOUNDARY_BAND, Box, fold_margin
from .target import DeviationConfig, LabeledSolutionSet, NeighborhoodIndex, deviation, phi, phi_s

SCHEMA_VERSION = 1
SPLITS = ("train", "search", "test")
CHANNELS = ("solution", "stability")


@dataclass
class ObservationRecord:
    theta: np.ndarray
    solutions: np.ndarray
    stability: np.ndarray
    complete: bool = True
    split: str = "train"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        sol = np.asarray(self.solutions, dtype=np.float64)
        if sol.ndim != 2:
            sol = sol.reshape(len(sol), -1) if sol.size else np.zeros((0, len(self.theta)))
        self.solutions = sol
        self.stability = np.asarray(self.stability, dtype=np.int64).reshape(-1)
        if len(self.stability) != len(self.solutions):
            raise ContractViolation("stability flags must match the solutions one-to-one")
        if self.split not in SPLITS:
            raise ContractViolation(f"unknown split {self.split!r}")

    @property
    def count(self) -> int:
        return len(self.solutions)


@dataclass
class ObservationSet:
    records: list
    omega: Box
    domain: Box

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def indices(self, name: str) -> list:
        return [i for i, r in enumerate(self.records) if r.split == name]

    def subset(self, name: str) -> "ObservationSet":
        return ObservationSet(self.split(name), self.omega, self.domain)


def _sample_parameters(omega: Box, count: int, rng: RandomSource, margin_fn) -> np.ndarray:
    out = np.empty((count, omega.dim))
    for i in range(count):
        while True:
            theta = omega.sample(rng, 1)[0]
            if margin_fn is None or abs(margin_fn(theta)) >= BOUNDARY_BAND:
                break
        out[i] = theta
    return out


def generate_observations(
    oracle: Callable,
    omega: Box,
    domain: Box,
    n_train: int = 1000,
    n_search: int = 100,
    n_test: int = 600,
    seed: int = 0,
    margin_fn: Optional[Callable] = fold_margin,
    thetas: Optional[np.ndarray] = None,
) -> ObservationSet:
    """Sample parameters uniformly in ``omega`` and record the oracle's full answer.

    Parameters inside the boundary band of ``margin_fn`` are redrawn. Records are
    ordered train, search, test. Passing ``thetas`` skips sampling and puts every
    record in the test split.
    """
    if thetas is None:
        rng = RandomSource(seed)
        total = n_train + n_search + n_test
        thetas = _sample_parameters(omega, total, rng, margin_fn)
        splits = ["train"] * n_train + ["search"] * n_search + ["test"] * n_test
    else:
        thetas = np.asarray(thetas, dtype=np.float64)
        splits = ["test"] * len(thetas)
    records = []
    for theta, split in zip(thetas, splits):
        sols, flags = oracle(theta)
        records.append(ObservationRecord(theta, sols, flags, True, split))
    return ObservationSet(records, omega, domain)


def mask_incomplete(obs: ObservationSet, count: int = 120, seed: int = 0) -> ObservationSet:
    """Drop one uniformly chosen solution from ``count`` train records holding two or more."""
    eligible = [i for i, r in enumerate(obs.records) if r.split == "train" and r.count >= 2]
    if count > len(eligible):
        raise ConfigurationError(
            f"asked to mask {count} records but only {len(eligible)} train records have 2+ solutions"
        )
    rng = RandomSource(seed)
    chosen = set(rng.choice(eligible, size=count, replace=False).tolist()) if count else set()
    records = []
    for i, r in enumerate(obs.records):
        if i in chosen:
            drop = int(rng.integers(r.count))
            keep = [j for j in range(r.count) if j != drop]
            r = ObservationRecord(r.theta, r.solutions[keep], r.stability[keep], False, r.split)
        else:
            r = ObservationRecord(r.theta, r.solutions.copy(), r.stability.copy(), r.complete, r.split)
        records.append(r)
    return ObservationSet(records, obs.omega, obs.domain)


def masked_indices(obs: ObservationSet) -> list:
    return [i for i, r in enumerate(obs.records) if not r.complete]


# -- training samples --------------------------------------------------------


class TrainingSample(NamedTuple):
    theta: np.ndarray
    U: np.ndarray
    target: float
    channel: str


@dataclass
class SamplingPlan:
    """How to draw the non-solution points of each record.

    ``uniform`` draws ``n_random`` fresh points from D per record (or one shared
    set when ``shared`` is set). ``concentrated`` draws ``points_per_solution``
    points from the ball of radius ``radius_multiplier * delta`` around each
    observed solution; records without solutions fall back to ``n_random``
    uniform points.
    """

    mode: str = "uniform"
    n_random: int = 200
    radius_multiplier: float = 2.0
    points_per_solution: int = 100
    shared: bool = False

    def __post_init__(self):
        if self.mode not in ("uniform", "concentrated"):
            raise ConfigurationError(f"unknown sampling mode {self.mode!r}")
        if self.n_random <= 0:
            raise ConfigurationError("n_random must be positive")


@dataclass
class TrainingSet:
    """Columnar training data: one row per (theta, U, target) sample."""

    theta: np.ndarray
    U: np.ndarray
    target: np.ndarray
    channel: str
    record: np.ndarray
    deltas: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.target)

    def __iter__(self) -> Iterator[TrainingSample]:
        for t, u, y in zip(self.theta, self.U, self.target):
            yield TrainingSample(t, u, float(y), self.channel)

    def take(self, idx) -> "TrainingSet":
        return TrainingSet(self.theta[idx], self.U[idx], self.target[idx], self.channel, self.record[idx])

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.theta, self.U, self.target):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update(self.channel.encode())
        return h.hexdigest()[:16]

    def to_csv(self, path):
        n_theta, n_u = self.theta.shape[1], self.U.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"theta{i}" for i in range(n_theta)] + [f"u{i}" for i in range(n_u)] + ["target", "channel"])
            for t, u, y in zip(self.theta, self.U, self.target):
                w.writerow([repr(float(x)) for x in t] + [repr(float(x)) for x in u] + [repr(float(y)), self.channel])


def _ball_points(center, radius, count, domain: Box, rng: RandomSource) -> np.ndarray:
    """Uniform points in the ball around ``center`` intersected with the open box."""
    dim = len(center)
    out = []
    need = count
    while need > 0:
        batch = max(2 * need, 16)
        direction = rng.normal(size=(batch, dim))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        r = radius * rng.uniform(size=(batch, 1)) ** (1.0 / dim)
        pts = center + direction * r
        pts = pts[domain.contains(pts)]
        out.append(pts[:need])
        need -= len(out[-1])
    return np.concatenate(out)[:count]


def record_deltas(obs: ObservationSet, name: str, cfg: DeviationConfig, estimate: bool) -> dict:
    """Width per record index of split ``name``.

    With ``estimate`` set, records whose observed count falls below their
    neighbourhood maximum use the neighbour-based estimate instead of their
    own (possibly incomplete) solution set.
    """
    idx = obs.indices(name)
    deltas = {}
    index = None
    if estimate:
        thetas = np.array([obs.records[i].theta for i in idx])
        sets = [obs.records[i].solutions for i in idx]
        index = NeighborhoodIndex(thetas, sets, cfg, obs.omega.widths)
    for local, i in enumerate(idx):
        r = obs.records[i]
        if r.count == 0:
            continue
        if index is not None and r.count < index.max_count(local):
            deltas[i] = index.estimate(local)
        else:
            deltas[i] = deviation(r.solutions, cfg)
    return deltas


def build_training_set(
    obs: ObservationSet,
    plan: SamplingPlan,
    channel: str,
    cfg: DeviationConfig,
    seed: int = 0,
    split: str = "train",
    estimate_deviation: bool = False,
) -> TrainingSet:
    """Samples at every observed solution plus randomly drawn points, per record of ``split``.

    Targets are evaluated on the observed solution set, never on hidden truth.
    """
    if channel not in CHANNELS:
        raise ConfigurationError(f"unknown channel {channel!r}")
    idx = obs.indices(split)
    if not idx:
        raise ContractViolation(f"split {split!r} is empty")
    deltas = record_deltas(obs, split, cfg, estimate_deviation)
    target_fn = phi if channel == "solution" else phi_s
    rng = RandomSource(seed)
    shared = obs.domain.sample(rng, plan.n_random) if plan.shared else None
    thetas, points, targets, owners = [], [], [], []
    for i in idx:
        r = obs.records[i]
        labeled = LabeledSolutionSet(r.theta, r.solutions, r.stability, deltas.get(i, 1.0))
        if plan.mode == "concentrated" and r.count:
            extra = np.concatenate(
                [
                    _ball_points(s, plan.radius_multiplier * labeled.delta, plan.points_per_solution, obs.domain, rng)
                    for s in r.solutions
                ]
            )
        elif shared is not None:
            extra = shared
        else:
            extra = obs.domain.sample(rng, plan.n_random)
        U = np.concatenate([r.solutions.reshape(-1, obs.domain.dim), extra])
        y = target_fn(U, labeled) if r.count else np.zeros(len(U))
        thetas.append(np.broadcast_to(r.theta, (len(U), len(r.theta))))
        points.append(U)
        targets.append(np.asarray(y, dtype=np.float64))
        owners.append(np.full(len(U), i))
    return TrainingSet(
        np.concatenate(thetas),
        np.concatenate(points),
        np.concatenate(targets),
        channel,
        np.concatenate(owners),
        deltas,
    )


# -- observation files -------------------------------------------------------


def _record_json(r: ObservationRecord) -> dict:
    return {
        "theta": [float(x) for x in r.theta],
        "solutions": [[float(x) for x in s] for s in r.solutions],
        "stability": [int(s) for s in r.stability],
        "complete": bool(r.complete),
        "split": r.split,
    }


def save_observations(obs: ObservationSet, path) -> None:
    """Write a JSON-lines file: a header object, then one record per line."""
    header = {"schema": SCHEMA_VERSION, "omega": obs.omega.bounds(), "domain": obs.domain.bounds()}
    lines = [json.dumps(header)] + [json.dumps(_record_json(r)) for r in obs.records]
    Path(path).write_text("\n".join(lines) + "\n")


def load_observations(path) -> ObservationSet:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ParseError(f"{path}: empty observation file")
    try:
        header = json.loads(text[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:1: header is not valid JSON ({exc.msg})") from None
    if header.get("schema") != SCHEMA_VERSION:
        raise ParseError(f"{path}:1: unsupported schema {header.get('schema')!r}")
    try:
        omega, domain = Box.from_bounds(header["omega"]), Box.from_bounds(header["domain"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}:1: bad header ({exc})") from None
    records = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        index = len(records)
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: record {index} is not valid JSON ({exc.msg})") from None
        missing = [k for k in ("theta", "solutions", "stability") if k not in raw]
        if missing:
            raise ParseError(f"{path}:{lineno}: record {index} is missing {', '.join(map(repr, missing))}")
        try:
            sols = np.array(raw["solutions"], dtype=np.float64).reshape(len(raw["solutions"]), domain.dim)
            records.append(
                ObservationRecord(
                    raw["theta"], sols, raw["stability"], bool(raw.get("complete", True)), raw.get("split", "train")
                )
            )
        except (ValueError, TypeError) as exc:
            raise ParseError(f"{path}:{lineno}: record {index} is malformed ({exc})") from None
    return ObservationSet(records, omega, domain)
