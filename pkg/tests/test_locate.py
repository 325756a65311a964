import numpy as np
import pytest

from psnn.errors import ContractViolation
from psnn.locate import (
    STABLE,
    UNSTABLE,
    ClusterParams,
    CutSearchConfig,
    GridSpec,
    LocateResult,
    MeanShiftParams,
    average_errors,
    cluster_fn,
    collect,
    kmeans,
    label_centers,
    locate,
    locate_header,
    meanshift_modes,
    parameter_error,
    set_distance,
    silhouette,
    stability_signature,
    write_locate_csv,
)
from psnn.dataset import TrainingSet, generate_observations
from psnn.network import PsnnModel
from psnn.system import GS_DOMAIN, GS_OMEGA, gray_scott_oracle, gray_scott_solutions
from psnn.target import deviation

FOUR = np.array([[0.1, 0.1], [0.12, 0.1], [0.9, 0.9], [0.88, 0.9]])


def _flat_model(channel="solution"):
    m = PsnnModel.create(2, 2, N=2, L1=1, W1=4, L2=1, W2=4, channel=channel, seed=0)
    for W, b in m.pnn:
        W[:] = 0
        b[:] = 0
    return m


def test_grid_points():
    pts = GridSpec((3, 5)).points(GS_DOMAIN)
    assert pts.shape == (15, 2)
    assert pts.min(0).tolist() == [0, 0] and pts.max(0).tolist() == [1, 1]


def test_grid_needs_two_points():
    with pytest.raises(Exception):
        GridSpec((1, 5))


def test_cut_grid():
    cuts = CutSearchConfig().cuts()
    assert len(cuts) == 11
    assert np.allclose(np.diff(cuts), 0.06)


def test_kmeans_single_cluster_is_mean():
    C, assign, _ = kmeans(FOUR, 1)
    assert np.allclose(C, FOUR.mean(0, keepdims=True)) and np.all(assign == 0)


def test_kmeans_four_points():
    C, _, _ = kmeans(FOUR, 2)
    C = C[np.argsort(C[:, 0])]
    assert np.allclose(C, [[0.11, 0.10], [0.89, 0.90]], atol=1e-12)


def test_kmeans_duplicates():
    C, _, inertia = kmeans(np.full((6, 2), 0.4), 1)
    assert np.allclose(C, [[0.4, 0.4]]) and inertia < 1e-30


def test_kmeans_rejects_large_k():
    with pytest.raises(ContractViolation):
        kmeans(FOUR, 5)


def test_kmeans_is_seeded():
    X = np.random.default_rng(0).uniform(size=(200, 2))
    a = kmeans(X, 4, ClusterParams(seed=3))
    b = kmeans(X, 4, ClusterParams(seed=3))
    assert np.array_equal(a[0], b[0])


def test_silhouette_separated_pairs():
    assert silhouette(FOUR, [0, 0, 1, 1]) > 0.9


def test_silhouette_identical_points():
    assert silhouette(np.zeros((4, 2)), [0, 0, 1, 1]) == 0.0


def test_silhouette_correct_assignment_is_best():
    best = silhouette(FOUR, [0, 0, 1, 1])
    for bits in range(1, 15):
        assign = [(bits >> i) & 1 for i in range(4)]
        if len(set(assign)) == 2:
            assert silhouette(FOUR, assign) <= best + 1e-15


def test_silhouette_needs_two_clusters():
    with pytest.raises(ContractViolation):
        silhouette(FOUR, [0, 0, 0, 0])


def test_single_blob_gives_one_center():
    blob = np.random.default_rng(1).normal([0.5, 0.5], 0.03, size=(300, 2))
    C, sil = cluster_fn(blob, ClusterParams())
    assert len(C) == 1 and sil < ClusterParams().sil1


def test_two_blobs_give_two_centers():
    rng = np.random.default_rng(2)
    a = rng.normal([0.34, 0.44], 0.02, size=(100, 2))
    b = rng.normal([0.66, 0.23], 0.02, size=(100, 2))
    C, _ = cluster_fn(np.vstack([a, b]))
    C = C[np.argsort(C[:, 0])]
    assert len(C) == 2
    assert np.allclose(C, [a.mean(0), b.mean(0)], atol=0.02)


def test_one_point_is_its_own_center():
    C, _ = cluster_fn(np.array([[0.3, 0.7]]))
    assert np.array_equal(C, [[0.3, 0.7]])


def test_collect_constant_field():
    model = _flat_model()
    grid = GridSpec((11, 11)).points(GS_DOMAIN)
    assert len(collect(model, (0.1, 0.05), grid, 0.6)) == 0
    assert len(collect(model, (0.1, 0.05), grid, 0.4)) == len(grid)


def test_locate_empty_field_has_no_centers():
    model = _flat_model()
    grid = GridSpec((11, 11)).points(GS_DOMAIN)
    res = locate(model, _flat_model("stability"), (0.1, 0.05), grid, 0.6)
    assert res.count == 0 and res.signature() == "none"


def test_stability_sign_rule():
    m = _flat_model("stability")
    theta = (0.1, 0.05)
    m.pnn[-1][1][:] = 1.0
    m.snn[-1][1][:] = 0.5
    assert label_centers(m, np.array([[0.2, 0.2]]), theta) == [STABLE]
    m.snn[-1][1][:] = -0.5
    assert label_centers(m, np.array([[0.2, 0.2]]), theta) == [UNSTABLE]


def test_signatures():
    assert stability_signature([], 0) == "none"
    assert stability_signature([UNSTABLE, UNSTABLE]) == "2-unstable"
    assert stability_signature([UNSTABLE, STABLE]) == "1-stable-1-unstable"
    assert stability_signature([STABLE, STABLE]) == "2-stable"
    assert stability_signature([STABLE]) == "other"


def test_set_distance_examples():
    T = np.array([[0.34, 0.44], [0.66, 0.22]])
    assert set_distance(T, T, GS_DOMAIN) == 0.0
    assert set_distance(T[::-1], T, GS_DOMAIN) == 0.0
    assert set_distance([[0.35, 0.44]], [[0.34, 0.44]], GS_DOMAIN) == pytest.approx(0.0070711, abs=1e-7)


def test_set_distance_size_mismatch():
    with pytest.raises(ContractViolation):
        set_distance([[0.1, 0.1]], [], GS_DOMAIN)


def test_parameter_error_terms():
    T = np.array([[0.34, 0.44]])
    assert parameter_error(np.zeros((0, 2)), T, GS_DOMAIN) == 1.0
    assert parameter_error(T + 0.01, T, GS_DOMAIN) == set_distance(T + 0.01, T, GS_DOMAIN)


def test_nothing_collected_scores_solution_fraction():
    model = _flat_model()
    obs = generate_observations(gray_scott_oracle, GS_OMEGA, GS_DOMAIN, thetas=[[0.1, 0.05], [0.01, 0.05], [0.2, 0.01]])
    grid = GridSpec((11, 11)).points(GS_DOMAIN)
    errs = average_errors(model, obs.records, grid, GS_DOMAIN, [0.95])
    frac = np.mean([r.count >= 1 for r in obs.records])
    assert errs[0] == pytest.approx(frac)


def test_locate_csv(tmp_path):
    res = [
        LocateResult(np.array([0.1, 0.05]), np.array([[0.3, 0.4], [0.6, 0.2]]), [STABLE, UNSTABLE], 0.8, 40),
        LocateResult(np.array([0.01, 0.05]), np.zeros((0, 2)), [], float("nan"), 0),
    ]
    path = tmp_path / "loc.csv"
    write_locate_csv(path, res, ["f", "k"], ["u", "v"], 5)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == locate_header(["f", "k"], ["u", "v"], 5)
    assert len(lines) == 3


def test_meanshift_fixed_point_at_solution():
    sol = np.array([0.3, 0.4])
    ring = sol + 0.01 * np.array([[1, 0], [-1, 0], [0, 1], [0, -1]])
    U = np.vstack([sol, ring])
    data = TrainingSet(np.tile([0.1, 0.05], (5, 1)), U, np.array([1.0, 0.5, 0.5, 0.5, 0.5]), "solution", np.zeros(5, int))
    ms = MeanShiftParams(gamma_p=0.01, gamma_s=0.05, n_initial=1)
    modes = meanshift_modes(data, np.array([0.1, 0.05]), ms, GS_DOMAIN, seed=0, starts=sol[None])
    assert np.allclose(modes.modes, [sol], atol=1e-14)


def test_meanshift_discards_zero_weight_start():
    data = TrainingSet(np.array([[0.1, 0.05]]), np.array([[0.3, 0.4]]), np.array([0.0]), "solution", np.zeros(1, int))
    ms = MeanShiftParams(gamma_p=0.01, gamma_s=0.05, n_initial=5)
    modes = meanshift_modes(data, np.array([0.1, 0.05]), ms, GS_DOMAIN, seed=0)
    assert len(modes.modes) == 0


# -- trained-model checks ----------------------------------------------------


def _near_fraction(trained, trained_cut, pipeline, radius):
    model, _ = trained
    theta = np.array([0.1, 0.05])
    pts = collect(model, theta, pipeline.grid, trained_cut)
    sols = gray_scott_solutions(theta)
    r = radius(deviation(sols, pipeline.deviation))
    return len(pts), (np.linalg.norm(pts[:, None] - sols[None], axis=-1).min(1) <= r).mean()


@pytest.mark.xfail(strict=True, reason="bump length scale is sqrt(delta); even the exact target puts only 84% within 2 delta")
def test_collected_points_within_two_delta(trained, trained_cut, pipeline):
    n, frac = _near_fraction(trained, trained_cut, pipeline, lambda d: 2 * d)
    assert n > 0 and frac >= 0.95


def test_collected_points_concentrate_at_solutions(trained, trained_cut, pipeline):
    n, frac = _near_fraction(trained, trained_cut, pipeline, lambda d: 2 * np.sqrt(d))
    assert n > 0 and frac >= 0.95


def test_trained_locate_examples(trained, trained_cut, pipeline):
    model, stab = trained
    empty = locate(model, stab, np.array([0.01, 0.05]), pipeline.grid, trained_cut, pipeline.cluster)
    assert empty.count == 0
    res = locate(model, stab, np.array([0.1, 0.05]), pipeline.grid, trained_cut, pipeline.cluster)
    sols = gray_scott_solutions((0.1, 0.05))
    assert res.count == 2
    assert set_distance(res.centers, sols, GS_DOMAIN) <= 0.05
    order = np.argmin(np.linalg.norm(res.centers[:, None] - sols[None], axis=-1), axis=1)
    assert [res.labels[i] for i in np.argsort(order)] == [STABLE, UNSTABLE]


def test_locate_is_deterministic(trained, trained_cut, pipeline):
    model, stab = trained
    a = locate(model, stab, np.array([0.05, 0.03]), pipeline.grid, trained_cut, pipeline.cluster)
    b = locate(model, stab, np.array([0.05, 0.03]), pipeline.grid, trained_cut, pipeline.cluster)
    assert np.array_equal(a.centers, b.centers) and a.labels == b.labels


def test_cut_search_minimizes(pipeline, trained):
    model, _ = trained
    result = pipeline.cut_value("complete", 0)
    records = pipeline.observations("complete").split("search")
    cfg = pipeline.cut_config
    high, low = average_errors(model, records, pipeline.grid, GS_DOMAIN, [0.95, cfg.lo], pipeline.cluster)
    best = min(result.errors)
    assert len(result.errors) == 11
    assert best <= high and best <= low
