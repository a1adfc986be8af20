import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from otdro.core.checks import check_projection_W
from otdro.core.dro_dataclasses import ConstantsBundle
from otdro.core.errors import ConfigurationError, DegenerateBoundsError
from otdro.core.losses import make_squared_loss
from otdro.core.models import Decision, DroProblem, SampleSet, callback_cost, identity_cost
from otdro.core.optimizer import solve_lambda_star
from otdro.core.oracle import grid_project
from otdro.core.regions import (
    build_constants,
    estimate_L_bounds,
    in_V,
    in_W,
    lambda_bounds,
    lambda_thr,
    lambda_thr_prime,
    project_U_eta,
    project_W,
)


def bundle(K1=0.5, K2=2.0, r_beta=1.0) -> ConstantsBundle:
    return ConstantsBundle(
        L_lower=1.0, L_upper=16.0, K1=K1, K2=K2, K2_table=K2, delta0=1.0, delta1=None,
        phi_min=1.0, kappa0=0.5, estimated=False, delta=0.01, r_beta=r_beta,
    )


def random_decisions(rng, count, d, scale=3.0):
    return [Decision(rng.uniform(-scale, scale, d), rng.uniform(-scale, 2 * scale)) for _ in range(count)]


def test_thresholds_for_squared_loss(regression_plane):
    beta = np.array([0.6, -0.8])
    assert lambda_thr(regression_plane, beta) == pytest.approx(0.2 * 1.0)
    assert lambda_thr_prime(regression_plane, beta) == pytest.approx(0.2 * 1.0)


def test_constants_from_given_bounds(logistic_plane):
    consts = build_constants(logistic_plane, (0.04, 0.2))
    assert consts.K1 == pytest.approx(0.1)
    assert consts.K2 == pytest.approx(0.0125 + math.sqrt(0.2))
    assert consts.K2_table == pytest.approx(0.025 + 0.2)
    assert consts.delta0 == pytest.approx(0.64)
    assert consts.phi_min == pytest.approx(0.175)
    assert consts.kappa0 == pytest.approx(0.02)
    assert consts.smooth_regime
    assert consts.lambda_cap == pytest.approx(consts.K2)
    assert not consts.estimated


def test_delta_thresholds_with_nondegeneracy(logistic_plane):
    problem = DroProblem(
        logistic_plane.data, logistic_plane.cost, logistic_plane.loss, 0.01, 1.0, nondegeneracy=(1.0, 1.0, 0.5)
    )
    consts = build_constants(problem, (0.04, 0.2))
    assert consts.delta1 == pytest.approx(min(0.16, 0.25 * 0.04 / 0.04 / 256.0))
    assert consts.delta2 == pytest.approx(0.5 / (2.0 + 4.0 * 2.0) ** 2)


def test_estimated_bounds_bracket_sampled_values(logistic_plane, rng):
    lower, upper, estimated = estimate_L_bounds(logistic_plane, seed=3)
    assert estimated and 0 < lower <= upper
    data = logistic_plane.data
    for _ in range(200):
        beta = rng.standard_normal(2)
        beta *= rng.uniform(0, 1) / np.linalg.norm(beta)
        value = np.mean(logistic_plane.loss.dplus(data.points @ beta, data.labels) ** 2)
        assert lower - 1e-6 <= value <= upper + 1e-6


def test_degenerate_bounds_raise():
    problem = DroProblem(SampleSet([[0.0]], [0.0]), identity_cost(1), make_squared_loss(), 0.1, 1.0)
    with pytest.raises(DegenerateBoundsError):
        estimate_L_bounds(problem)


def test_bound_override_is_validated(logistic_plane):
    assert estimate_L_bounds(logistic_plane, override=(0.1, 0.3)) == (0.1, 0.3, False)
    with pytest.raises(ConfigurationError):
        estimate_L_bounds(logistic_plane, override=(0.3, 0.1))


def test_lambda_bounds_bracket_lambda_star(regression_plane):
    beta = np.array([0.7, -0.2])
    low, high = lambda_bounds(regression_plane, beta)
    star = solve_lambda_star(regression_plane, beta)
    assert star.at_bound is None
    assert low <= star.lam <= high


def test_membership():
    consts = bundle()
    assert in_V(Decision([0.6, 0.8], 1.0), consts)
    assert not in_V(Decision([0.6, 0.8], 0.4), consts)
    assert in_W(Decision([0.6, 0.8], 2.0), consts, 1.0)
    assert not in_W(Decision([0.6, 0.8], 2.5), consts, 1.0)
    assert not in_W(Decision([1.2, 0.0], 1.0), consts, 1.0)


# ------------------------------------------------------------
# Π_𝕎
# ------------------------------------------------------------


def test_project_W_matches_grid_projection():
    report = check_projection_W(points=40, seed=9)
    assert report.passed, report.to_json()


def test_project_W_is_idempotent_and_feasible(rng):
    consts = bundle()
    for theta in random_decisions(rng, 500, 3):
        projected = project_W(theta, consts, 1.0)
        assert in_W(projected, consts, 1.0, tol=1e-12)
        again = project_W(projected, consts, 1.0)
        assert_allclose(again.as_vector(), projected.as_vector(), atol=1e-12)


def test_project_W_is_nonexpansive(rng):
    consts = bundle()
    for left, right in zip(random_decisions(rng, 1000, 3), random_decisions(rng, 1000, 3)):
        moved = np.linalg.norm(
            project_W(left, consts, 1.0).as_vector() - project_W(right, consts, 1.0).as_vector()
        )
        assert moved <= np.linalg.norm(left.as_vector() - right.as_vector()) + 1e-9


def test_project_W_keeps_pinned_coordinates(rng):
    consts = bundle(K1=0.5, K2=2.0, r_beta=1.0)
    pinned = ((0, 0.3),)
    for theta in random_decisions(rng, 200, 3):
        projected = project_W(theta, consts, 1.0, pinned)
        assert projected.beta[0] == 0.3
        assert in_W(projected, consts, 1.0, tol=1e-9)
        again = project_W(projected, consts, 1.0, pinned)
        assert_allclose(again.as_vector(), projected.as_vector(), atol=1e-8)


# ------------------------------------------------------------
# Π_𝕌η
# ------------------------------------------------------------


def test_project_U_eta_without_curvature_is_a_box(logistic_plane):
    projected = project_U_eta(Decision([3.0, 4.0], -1.0), logistic_plane, 0.05)
    assert_allclose(projected.beta, [0.6, 0.8])
    assert projected.lam == 0.05


def test_project_U_eta_is_feasible_idempotent_and_nonexpansive(regression_plane, rng):
    eta = 0.01
    projected = []
    for theta in random_decisions(rng, 300, 2):
        result = project_U_eta(theta, regression_plane, eta)
        assert result.beta_norm <= regression_plane.r_beta * (1 + 1e-12)
        assert result.lam >= lambda_thr(regression_plane, result.beta) + eta - 1e-10
        again = project_U_eta(result, regression_plane, eta)
        assert_allclose(again.as_vector(), result.as_vector(), atol=1e-9)
        projected.append((theta, result))
    for (x, px), (y, py) in zip(projected, projected[1:]):
        moved = np.linalg.norm(px.as_vector() - py.as_vector())
        assert moved <= np.linalg.norm(x.as_vector() - y.as_vector()) + 1e-9


def test_project_U_eta_matches_grid_projection(single_atom, rng):
    eta = 0.01
    slope = 0.5
    constraints = [
        lambda p: p[:, 1] - slope * p[:, 0] ** 2 - eta,
        lambda p: 4.0 - p[:, 0] ** 2,
    ]
    for _ in range(25):
        point = np.array([rng.uniform(-3.0, 3.0), rng.uniform(-1.0, 3.0)])
        fast = project_U_eta(Decision(point[:1], point[1]), single_atom, eta).as_vector()
        reference = grid_project(point, constraints, [(-2.0, 2.0), (0.0, 5.0)])
        assert np.linalg.norm(fast - point) <= np.linalg.norm(reference - point) + 1e-9
        assert_allclose(fast, reference, atol=1e-5)


def test_project_U_eta_with_callback_cost(rng):
    data = SampleSet(rng.standard_normal((3, 2)), rng.standard_normal(3))
    exact_problem = DroProblem(data, identity_cost(2), make_squared_loss(), 0.04, 3.0)
    callback_problem = DroProblem(
        data, callback_cost(lambda x: np.eye(2), 2, 1.0, 1.0), make_squared_loss(), 0.04, 3.0
    )
    theta = Decision([0.3, -0.2], -0.5)
    exact = project_U_eta(theta, exact_problem, 0.01)
    approximate = project_U_eta(theta, callback_problem, 0.01)
    assert_allclose(approximate.as_vector(), exact.as_vector(), atol=1e-8)


def test_project_U_eta_rejects_negative_eta(regression_plane):
    with pytest.raises(ConfigurationError):
        project_U_eta(Decision([0.0, 0.0], 1.0), regression_plane, -0.1)
