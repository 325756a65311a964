import numpy as np
import pytest

from psnn.errors import ContractViolation, NumericalDomainError
from psnn.system import (
    GRAY_SCOTT,
    GS_OMEGA,
    Box,
    Stability,
    SystemDefinition,
    classify_jacobian,
    fold_margin,
    gray_scott_region,
    gray_scott_solutions,
    gray_scott_stability,
    jacobian,
    linear_stability,
    residual,
    stability_margin,
)

THETA = (0.1, 0.05)


def test_trivial_state_has_zero_residual():
    assert np.allclose(residual(GRAY_SCOTT, [1.0, 0.0], THETA), 0.0)


def test_closed_form_state_has_small_residual():
    assert np.all(np.abs(residual(GRAY_SCOTT, [0.3418861, 0.4387426], THETA)) < 1e-6)


def test_residual_hand_value():
    assert np.allclose(residual(GRAY_SCOTT, [0.5, 0.5], THETA), [-0.075, 0.05])


def test_jacobian_at_trivial_state():
    # -2uv vanishes at v = 0, so the upper-right entry is 0
    J = jacobian(GRAY_SCOTT, [1.0, 0.0], THETA)
    assert np.allclose(J, [[-0.1, 0.0], [0.0, -0.15]])
    assert np.allclose(J, jacobian(GRAY_SCOTT, [1.0, 0.0], THETA, finite_difference=True), atol=1e-9)


def test_finite_difference_jacobian_matches_analytic():
    rng = np.random.default_rng(1)
    for _ in range(100):
        U = rng.uniform(0, 1, 2)
        theta = GS_OMEGA.lower + rng.uniform(size=2) * GS_OMEGA.widths
        exact = jacobian(GRAY_SCOTT, U, theta)
        approx = jacobian(GRAY_SCOTT, U, theta, finite_difference=True)
        assert np.max(np.abs(exact - approx)) < 1e-6


def test_zero_system_has_zero_jacobian():
    zero = SystemDefinition(
        name="zero", n=2, m=1, solution_box=Box((0, 0), (1, 1)), parameter_box=Box((0,), (1,)),
        residual_fn=lambda U, t: np.zeros(2),
    )
    assert np.allclose(jacobian(zero, [0.3, 0.4], [0.5]), 0.0)


def test_closed_form_solutions():
    sols = gray_scott_solutions(THETA)
    assert np.allclose(sols, [[0.3418861, 0.4387426], [0.6581139, 0.2279240]], atol=1e-6)
    for U in sols:
        assert np.max(np.abs(residual(GRAY_SCOTT, U, THETA))) < 1e-12


def test_no_solutions_below_fold():
    assert fold_margin((0.29, 0.079)) == pytest.approx(-0.254644, abs=1e-6)
    assert len(gray_scott_solutions((0.29, 0.079))) == 0


def test_double_root_on_fold():
    f = 0.04
    k = np.sqrt(f / 4) - f
    sols = gray_scott_solutions((f, k))
    assert sols.shape == (1, 2)
    assert sols[0, 0] == 0.5
    assert gray_scott_region((f, k)).on_boundary


def test_outside_omega_is_domain_error():
    with pytest.raises(NumericalDomainError):
        gray_scott_solutions((0.4, 0.01))


@pytest.mark.parametrize("theta,index,count", [((0.1, 0.05), 1, 2), ((0.01, 0.05), 0, 0), ((0.04, 0.05), 1, 2)])
def test_regions(theta, index, count):
    label = gray_scott_region(theta)
    assert (label.index, label.count) == (index, count)


def test_stability_hand_value():
    assert stability_margin(THETA) == pytest.approx(0.0064123, abs=1e-7)
    assert gray_scott_stability(THETA) == (0, 1)


def test_stability_outside_two_solution_region():
    with pytest.raises(NumericalDomainError):
        gray_scott_stability((0.01, 0.05))


def test_eigenvalue_classification():
    assert classify_jacobian(np.diag([-1.0, -2.0])) is Stability.STABLE
    assert classify_jacobian(np.diag([1.0, -2.0])) is Stability.UNSTABLE
    assert classify_jacobian(np.diag([0.0, -2.0])) is Stability.INDETERMINATE


def test_second_state_is_saddle():
    f, k = THETA
    u, v = gray_scott_solutions(THETA)[1]
    assert (f + k) * (v * v - f) < 0
    assert linear_stability(GRAY_SCOTT, [u, v], THETA) is Stability.UNSTABLE


def test_linear_stability_needs_steady_state():
    with pytest.raises(ContractViolation):
        linear_stability(GRAY_SCOTT, [0.5, 0.5], THETA)


def _omega1_draws(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        theta = GS_OMEGA.lower + rng.uniform(size=2) * GS_OMEGA.widths
        if fold_margin(theta) > 1e-10:
            out.append(theta)
    return out


def test_closed_form_residuals_over_region():
    worst = 0.0
    for theta in _omega1_draws(10_000, 2):
        for U in gray_scott_solutions(theta):
            worst = max(worst, np.max(np.abs(residual(GRAY_SCOTT, U, theta))))
    assert worst < 1e-10


def test_closed_form_stability_matches_eigenvalues():
    checked = 0
    for theta in _omega1_draws(1000, 3):
        if abs(stability_margin(theta)) <= 1e-8:
            continue
        flags = gray_scott_stability(theta)
        for U, flag in zip(gray_scott_solutions(theta), flags):
            got = linear_stability(GRAY_SCOTT, U, theta)
            assert got is (Stability.STABLE if flag == 0 else Stability.UNSTABLE)
        assert flags[1] == 1
        checked += 1
    assert checked > 900


def test_u_coordinates_sum_to_one():
    for theta in _omega1_draws(200, 4):
        sols = gray_scott_solutions(theta)
        assert sols[0, 0] + sols[1, 0] == pytest.approx(1.0, abs=1e-15)


def test_region_count_matches_solution_list():
    rng = np.random.default_rng(5)
    for _ in range(2000):
        theta = GS_OMEGA.lower + rng.uniform(size=2) * GS_OMEGA.widths
        label = gray_scott_region(theta)
        if not label.on_boundary:
            assert label.count == len(gray_scott_solutions(theta))
