import numpy as np
import pytest
from numpy.testing import assert_allclose

from otdro.core.dual_objective import f_delta, inner_maximize
from otdro.core.errors import ConfigurationError
from otdro.core.losses import make_squared_loss
from otdro.core.models import Decision, DroProblem, SampleSet, identity_cost
from otdro.core.oracle import (
    fd_hessian,
    grid_inner_max,
    grid_min_fdelta,
    grid_project,
    hessian_probe,
    nonrobust_objective,
    oracle_fdelta,
    primal_bound,
)


def test_grid_inner_max_on_single_atom(single_atom):
    g, value = grid_inner_max(single_atom, Decision([1.0], 2.0), 0)
    assert g == pytest.approx(-2.0 / 3.0, abs=1e-8)
    assert value == pytest.approx(7.0 / 3.0, abs=1e-10)


def test_grid_inner_max_rejects_bad_index(single_atom):
    with pytest.raises(ConfigurationError, match="out of range"):
        grid_inner_max(single_atom, Decision([1.0], 2.0), 3)


def test_oracle_fdelta_agrees_with_fast_path(regression_plane):
    theta = Decision([0.4, 0.1], 1.2)
    assert oracle_fdelta(regression_plane, theta) == pytest.approx(f_delta(regression_plane, theta), abs=1e-8)
    assert oracle_fdelta(regression_plane, Decision([0.4, 0.1], -1.0)) == np.inf


def test_primal_bound_sits_below_dual_value(single_atom):
    support = np.linspace(-2.0, 2.0, 401)
    lower = primal_bound(single_atom, [1.0], support)
    assert lower <= 2.25 + 1e-9
    assert lower == pytest.approx(2.25, abs=1e-3)


def test_primal_bound_on_regression(regression_plane):
    beta = np.array([0.7, -0.2])
    axis = np.linspace(-4.0, 4.0, 41)
    support = np.array(np.meshgrid(axis, axis)).reshape(2, -1).T
    lower = primal_bound(regression_plane, beta, support)
    theta = Decision(beta, 2.0)
    assert lower <= f_delta(regression_plane, theta) + 1e-9


def test_primal_bound_needs_reachable_support(single_atom):
    with pytest.raises(ConfigurationError, match="budget"):
        primal_bound(single_atom, [1.0], [5.0, 6.0])


def test_fd_hessian_of_quadratic():
    matrix = np.array([[2.0, 0.5], [0.5, 1.0]])
    hessian = fd_hessian(lambda x: 0.5 * x @ matrix @ x, [0.3, -0.7], 1e-3)
    assert_allclose(hessian, matrix, atol=1e-6)
    along = fd_hessian(lambda x: 0.5 * x @ matrix @ x, [0.3, -0.7], 1e-3, directions=[[1.0, 0.0]])
    assert_allclose(along, [[2.0]], atol=1e-6)


def test_robust_objective_curves_where_empirical_loss_is_flat():
    # no data along e3: the empirical loss ignores β₃, the robust objective does not
    problem = DroProblem(
        SampleSet([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [3.0, -3.0]),
        identity_cost(3),
        make_squared_loss(),
        delta=0.01,
        r_beta=1.0,
    )
    directions = [[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
    thetas = [Decision([0.3, -0.2, 0.0], 1.0), Decision([0.5, 0.5, 0.0], 0.8), Decision([-0.4, 0.1, 0.0], 1.5)]
    probe = hessian_probe(problem, None, thetas, h=1e-3, directions=directions)
    assert probe.skipped == 0
    assert np.all(probe.min_eigenvalues > 0)

    flat = fd_hessian(lambda x: nonrobust_objective(problem, x), [0.3, -0.2, 0.0], 1e-3, [[0.0, 0.0, 1.0]])
    assert flat[0, 0] == 0.0


def test_hessian_probe_skips_stencils_outside_domain(single_atom):
    # λ_thr = √δ·β² = 0.5 at β = 1
    probe = hessian_probe(single_atom, None, [Decision([1.0], 0.5005), Decision([1.0], 2.0)], h=1e-3)
    assert probe.skipped == 1
    assert probe.min_eigenvalues.size == 1


def test_grid_min_fdelta_on_single_atom(single_atom):
    theta, value = grid_min_fdelta(single_atom, [(-2.0, 2.0)], (0.0, 4.0), resolution=21, levels=6)
    assert value == pytest.approx(1.0, abs=1e-12)
    assert f_delta(single_atom, theta) == pytest.approx(value, abs=1e-6)


def test_grid_min_fdelta_checks_box_dimension(single_atom):
    with pytest.raises(ConfigurationError):
        grid_min_fdelta(single_atom, [(-1.0, 1.0), (-1.0, 1.0)], (0.0, 1.0))


def test_grid_project_onto_disc():
    constraints = [lambda p: 1.0 - p[:, 0] ** 2 - p[:, 1] ** 2]
    projected = grid_project(np.array([2.0, 0.0]), constraints, [(-1.0, 1.0), (-1.0, 1.0)])
    assert_allclose(projected, [1.0, 0.0], atol=1e-4)


def test_inner_maximize_matches_grid_on_regression(regression_plane):
    theta = Decision([0.4, 0.1], 1.2)
    for row in range(3):
        fast = inner_maximize(regression_plane, theta, row).lrob
        _, reference = grid_inner_max(regression_plane, theta, row)
        assert fast == pytest.approx(reference, abs=1e-9)
