import numpy as np
import pytest

from psnn.dataset import SamplingPlan, TrainingSet, build_training_set
from psnn.errors import ConfigurationError
from psnn.network import PsnnModel, psnn_backward, psnn_forward
from psnn.numerics import RandomSource
from psnn.training import (
    SWEEP_HEADER,
    AdamState,
    SweepCell,
    TrainConfig,
    adam_step,
    convergence_sweep,
    convergence_warning,
    depth_grid,
    depth_trends,
    grouped_order,
    loglog_slope,
    loss,
    train,
    width_trends,
)


def _set(n=40, seed=0, channel="solution"):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(size=(n, 2))
    U = rng.uniform(size=(n, 2))
    return TrainingSet(theta, U, rng.uniform(size=n), channel, np.arange(n) // 4)


def _model(seed=0, channel="solution"):
    return PsnnModel.create(2, 2, N=4, L1=1, W1=8, L2=1, W2=8, channel=channel, seed=seed)


def test_default_config():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps) == (512, 1e-3, 0.9, 0.999, 1e-8)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0.0)


def test_loss_of_constant_half():
    m = _model()
    for W, b in m.pnn:
        W[:] = 0
        b[:] = 0
    data = _set()
    data.target[:] = 0.0
    assert loss(m, data) == pytest.approx(0.25)


def test_loss_matches_backward_value():
    m, data = _model(1), _set(seed=1)
    value, _ = psnn_backward(m, data.U, data.theta, data.target)
    assert abs(loss(m, data) - value) <= 1e-15


def test_perfect_model_loss_is_zero():
    m, data = _model(2), _set(seed=2)
    data.target[:] = psnn_forward(m, data.U, data.theta)
    assert loss(m, data) == 0.0


def test_zero_gradient_decays_moments():
    params = [np.zeros(3)]
    state = AdamState.zeros_like(params)
    adam_step(params, [np.ones(3)], state, TrainConfig())
    m, v = state.m[0].copy(), state.v[0].copy()
    adam_step(params, [np.zeros(3)], state, TrainConfig())
    assert np.all(state.m[0] < m) and np.all(state.v[0] < v) and state.t == 2


def test_zero_gradient_from_fresh_state():
    params = [np.array([0.5, -0.5])]
    state = AdamState.zeros_like(params)
    adam_step(params, [np.zeros(2)], state, TrainConfig())
    assert np.array_equal(params[0], [0.5, -0.5])


def test_first_step_is_signed_learning_rate():
    g = np.array([3.0, -0.2, 50.0])
    params = [np.zeros(3)]
    adam_step(params, [g], AdamState.zeros_like(params), TrainConfig())
    assert np.allclose(params[0], -1e-3 * np.sign(g), rtol=1e-6)


def test_scaled_gradient_keeps_direction():
    g = np.random.default_rng(3).normal(size=20)
    a, b = [np.zeros(20)], [np.zeros(20)]
    adam_step(a, [g], AdamState.zeros_like(a), TrainConfig())
    adam_step(b, [7.5 * g], AdamState.zeros_like(b), TrainConfig())
    assert np.array_equal(np.sign(a[0]), np.sign(b[0]))


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(4)
        params = [np.zeros(5)]
        state = AdamState.zeros_like(params)
        for _ in range(100):
            adam_step(params, [rng.normal(size=5)], state, TrainConfig())
        return params[0]

    assert np.array_equal(run(), run())


def test_grouped_order_is_a_permutation_with_runs():
    record = np.repeat(np.arange(10), 20)
    order = grouped_order(record, 8, RandomSource(0))
    assert np.array_equal(np.sort(order), np.arange(200))
    runs = record[order].reshape(-1)
    changes = np.count_nonzero(np.diff(runs))
    assert changes < 200 // 4
    assert np.array_equal(order, grouped_order(record, 8, RandomSource(0)))


def test_overfit_single_point():
    data = TrainingSet(np.array([[0.1, 0.05]]), np.array([[0.3, 0.4]]), np.array([0.5]), "solution", np.zeros(1, int))
    model, report = train(_model(5), data, None, TrainConfig(epochs=2000, batch_size=1, learning_rate=1e-3))
    assert report.epoch_loss[-1] < 1e-6


def test_training_is_pure():
    data = _set(80, seed=6)
    a, _ = train(_model(6), data, None, TrainConfig(epochs=5, batch_size=16))
    b, _ = train(_model(6), data, None, TrainConfig(epochs=5, batch_size=16))
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert a.metadata["data_digest"] == data.digest()


def test_channel_mismatch_is_rejected():
    with pytest.raises(ConfigurationError):
        train(_model(channel="stability"), _set(), None, TrainConfig(epochs=1))


def test_convergence_warning():
    assert convergence_warning(list(np.linspace(1, 0.1, 100))) is None
    assert "did not decrease" in convergence_warning(list(np.linspace(1, 0.1, 90)) + list(np.linspace(0.1, 0.5, 10)))


def test_depth_grid_size():
    assert len(depth_grid()) == 18


def test_sweep_rows(tmp_path, small_obs, gs_cfg):
    plan = SamplingPlan(n_random=10)
    tr = build_training_set(small_obs, plan, "solution", gs_cfg, seed=1)
    te = build_training_set(small_obs, plan, "solution", gs_cfg, seed=2, split="test")
    cells = depth_grid(Ns=(2,), depths=(1, 2), W1=4, W2=4)
    out = tmp_path / "sweep.csv"
    rows = convergence_sweep(cells, [0], tr, te, TrainConfig(epochs=2), out)
    assert len(rows) == 2
    assert out.read_text().splitlines()[0] == ",".join(SWEEP_HEADER)


def test_depth_trends_on_synthetic_rows():
    rows = []
    for N, scale in ((2, 2.0), (8, 1.0)):
        for d in range(1, 7):
            for seed in range(3):
                rows.append({"N": N, "L1": d, "W1": 30, "L2": d, "W2": 20, "seed": seed, "test_mse": scale / d})
    out = depth_trends(rows)
    assert out["N_beats"] and out["depth_decreases"]


def test_loglog_slope():
    w = np.array([10.0, 100.0, 1000.0])
    assert loglog_slope(w, w**-0.5) == pytest.approx(-0.5)


def test_width_trends_on_synthetic_rows():
    base = SweepCell(8, 2, 10, 2, 10)
    rows = []
    for w in (5, 10, 20, 40):
        rows.append({"N": 8, "L1": 2, "W1": 10, "L2": 2, "W2": w, "seed": 0, "test_mse": 1.0 / w**2})
        rows.append({"N": 8, "L1": 2, "W1": w, "L2": 2, "W2": 10, "seed": 0, "test_mse": 1.0 / w})
    assert width_trends(rows, base)["solution_faster"]
