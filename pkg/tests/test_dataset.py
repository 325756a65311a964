import json

import numpy as np
import pytest

from psnn.dataset import (
    SamplingPlan,
    build_training_set,
    generate_observations,
    load_observations,
    mask_incomplete,
    masked_indices,
    save_observations,
)
from psnn.errors import ConfigurationError, ParseError
from psnn.system import GS_DOMAIN, GS_OMEGA, fold_margin, gray_scott_oracle
from psnn.target import DeviationConfig, LabeledSolutionSet, phi, phi_s


def _obs(n_train, seed=0, n_search=0, n_test=0):
    return generate_observations(gray_scott_oracle, GS_OMEGA, GS_DOMAIN, n_train, n_search, n_test, seed)


def test_region_zero_record_is_empty():
    obs = generate_observations(gray_scott_oracle, GS_OMEGA, GS_DOMAIN, thetas=[[0.01, 0.05]])
    rec = obs.records[0]
    assert rec.count == 0 and rec.split == "test"


def test_generation_is_seeded():
    a, b = _obs(1000, seed=5), _obs(1000, seed=5)
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.theta, rb.theta)
        assert np.array_equal(ra.solutions, rb.solutions)


def test_two_solution_fraction_matches_area():
    obs = generate_observations(gray_scott_oracle, GS_OMEGA, GS_DOMAIN, 100_000, 0, 0, seed=1, margin_fn=None)
    frac = np.mean([r.count == 2 for r in obs.records])
    # independent Monte-Carlo estimate of the two-solution area
    rng = np.random.default_rng(99)
    f = rng.uniform(0, 0.3, 400_000)
    k = rng.uniform(0, 0.08, 400_000)
    area = np.mean(f > 4 * (f + k) ** 2)
    assert abs(frac - area) < 0.03


def test_boundary_band_is_excluded(small_obs):
    assert all(abs(fold_margin(r.theta)) >= 1e-10 for r in small_obs.records)


def test_splits_are_disjoint_and_cover(small_obs):
    sizes = [len(small_obs.split(s)) for s in ("train", "search", "test")]
    assert sizes == [60, 10, 20]
    assert sum(sizes) == len(small_obs)


def test_mask_zero_is_identity(small_obs):
    masked = mask_incomplete(small_obs, 0)
    assert masked_indices(masked) == []
    for a, b in zip(small_obs.records, masked.records):
        assert np.array_equal(a.solutions, b.solutions)


def test_mask_120_of_1200():
    obs = _obs(1200, seed=2)
    masked = mask_incomplete(obs, 120, seed=3)
    idx = masked_indices(masked)
    assert len(idx) == 120
    for i in idx:
        kept = masked.records[i].solutions
        assert len(kept) == 1 and obs.records[i].count == 2
        assert any(np.array_equal(kept[0], s) for s in obs.records[i].solutions)


def test_mask_needs_enough_records(small_obs):
    with pytest.raises(ConfigurationError, match="only"):
        mask_incomplete(small_obs, 1000)


def test_two_solution_record_gives_202_samples(gs_cfg):
    obs = generate_observations(gray_scott_oracle, GS_OMEGA, GS_DOMAIN, thetas=[[0.1, 0.05]])
    ts = build_training_set(obs, SamplingPlan(n_random=200), "solution", gs_cfg, split="test")
    assert len(ts) == 202


def test_empty_record_gives_zero_targets(gs_cfg):
    obs = generate_observations(gray_scott_oracle, GS_OMEGA, GS_DOMAIN, thetas=[[0.01, 0.05]])
    ts = build_training_set(obs, SamplingPlan(n_random=200), "stability", gs_cfg, split="test")
    assert len(ts) == 200 and np.all(ts.target == 0.0)


def test_concentrated_points_stay_near_solutions(gs_cfg):
    obs = generate_observations(gray_scott_oracle, GS_OMEGA, GS_DOMAIN, thetas=[[0.1, 0.05]])
    plan = SamplingPlan(mode="concentrated", points_per_solution=100)
    ts = build_training_set(obs, plan, "solution", gs_cfg, split="test")
    assert len(ts) == 202
    sols = obs.records[0].solutions
    delta = ts.deltas[0]
    d = np.linalg.norm(ts.U[2:, None, :] - sols[None], axis=-1).min(axis=1)
    assert np.all(d <= 2 * delta + 1e-12)


def test_targets_match_recomputation(small_obs, gs_cfg):
    for channel, fn in (("solution", phi), ("stability", phi_s)):
        ts = build_training_set(small_obs, SamplingPlan(n_random=20), channel, gs_cfg, seed=4)
        for i in np.unique(ts.record):
            r = small_obs.records[i]
            rows = ts.record == i
            if r.count == 0:
                assert np.all(ts.target[rows] == 0)
                continue
            labeled = LabeledSolutionSet(r.theta, r.solutions, r.stability, ts.deltas[i])
            assert np.max(np.abs(fn(ts.U[rows], labeled) - ts.target[rows])) <= 1e-14


def test_sample_total(small_obs, gs_cfg):
    ts = build_training_set(small_obs, SamplingPlan(n_random=30), "solution", gs_cfg)
    assert len(ts) == sum(r.count + 30 for r in small_obs.split("train"))


def test_incomplete_concentrated_avoids_missing_solution(gs_cfg):
    obs = _obs(300, seed=6)
    masked = mask_incomplete(obs, 40, seed=7)
    plan = SamplingPlan(mode="concentrated", points_per_solution=50)
    ts = build_training_set(masked, plan, "solution", gs_cfg, seed=8, estimate_deviation=True)
    for i in masked_indices(masked):
        kept = masked.records[i].solutions[0]
        missing = [s for s in obs.records[i].solutions if not np.array_equal(s, kept)][0]
        pts = ts.U[ts.record == i]
        radius = 2 * ts.deltas[i]
        assert np.all(np.linalg.norm(pts - kept, axis=1) <= radius + 1e-12)
        # the missing state lies beyond the sampled ball
        assert np.min(np.linalg.norm(pts - missing, axis=1)) > 0


def test_training_set_is_seeded(small_obs, gs_cfg):
    a = build_training_set(small_obs, SamplingPlan(n_random=10), "solution", gs_cfg, seed=1)
    b = build_training_set(small_obs, SamplingPlan(n_random=10), "solution", gs_cfg, seed=1)
    assert a.digest() == b.digest()


def test_round_trip(tmp_path):
    obs = mask_incomplete(_obs(1000, seed=9, n_search=100, n_test=100), 120, seed=1)
    path = tmp_path / "obs.jsonl"
    save_observations(obs, path)
    back = load_observations(path)
    assert len(back) == 1200
    for a, b in zip(obs.records, back.records):
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.solutions, b.solutions)
        assert np.array_equal(a.stability, b.stability)
        assert (a.complete, a.split) == (b.complete, b.split)


def test_empty_solutions_serialize_as_list(tmp_path):
    obs = generate_observations(gray_scott_oracle, GS_OMEGA, GS_DOMAIN, thetas=[[0.01, 0.05]])
    path = tmp_path / "obs.jsonl"
    save_observations(obs, path)
    rec = json.loads(path.read_text().splitlines()[1])
    assert rec["solutions"] == []


def test_missing_key_names_record(tmp_path):
    obs = generate_observations(gray_scott_oracle, GS_OMEGA, GS_DOMAIN, thetas=[[0.1, 0.05], [0.2, 0.01]])
    path = tmp_path / "obs.jsonl"
    save_observations(obs, path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[2])
    del rec["solutions"]
    lines[2] = json.dumps(rec)
    path.write_text("\n".join(lines))
    with pytest.raises(ParseError, match="record 1") as err:
        load_observations(path)
    assert "solutions" in str(err.value)
