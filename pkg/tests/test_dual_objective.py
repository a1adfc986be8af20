import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from otdro.core.checks import check_logistic_gradient, check_squared_closed_form
from otdro.core.dro_dataclasses import InnerSolution
from otdro.core.dual_objective import (
    DomainClass,
    classify_domain,
    eval_F,
    f_delta,
    fallback_maximize,
    full_gradient,
    grad_lrob,
    inner_maximize,
    lrob_hinge_closed_form,
    solve_inner,
    squared_loss_lrob_closed_form,
    subgrad_lrob,
)
from otdro.core.errors import (
    ConfigurationError,
    InfeasibleDomainError,
    KinkError,
    NonconcaveRegimeError,
)
from otdro.core.losses import make_hinge_loss, make_logistic_loss, make_smooth_loss
from otdro.core.models import Decision, DroProblem, SampleSet, identity_cost
from otdro.core.oracle import fd_gradient, grid_inner_max, nonrobust_objective


def test_single_atom_inner_solution(single_atom):
    inner = inner_maximize(single_atom, Decision([1.0], 2.0), 0)
    assert inner.g == pytest.approx(-2.0 / 3.0, abs=1e-12)
    assert inner.lrob == pytest.approx(7.0 / 3.0, abs=1e-12)
    assert_allclose(inner.x_tilde, [-1.0 / 3.0], atol=1e-12)
    assert inner.certified


def test_single_atom_F_at_maximizer(single_atom):
    assert eval_F(single_atom, -2.0 / 3.0, Decision([1.0], 2.0), 0) == pytest.approx(7.0 / 3.0)
    assert eval_F(single_atom, 0.0, Decision([1.0], 2.0), 0) == pytest.approx(1.0 + 1.0)


def test_single_atom_gradient(single_atom):
    theta = Decision([1.0], 2.0)
    inner = inner_maximize(single_atom, theta, 0)
    sample = grad_lrob(single_atom, theta, 0, inner)
    assert_allclose(sample.d_beta, [8.0 / 9.0], atol=1e-12)
    assert sample.d_lambda == pytest.approx(5.0 / 18.0, abs=1e-12)
    assert_allclose(full_gradient(single_atom, theta), [8.0 / 9.0, 5.0 / 18.0], atol=1e-12)


def test_zero_beta_gives_nonrobust_loss_plus_lambda_term(single_atom):
    assert f_delta(single_atom, Decision([0.0], 2.0)) == pytest.approx(1.0 + 2.0 * 0.5)


@pytest.mark.parametrize(
    "lam, expected",
    [(0.4, DomainClass.INFEASIBLE), (0.5, DomainClass.BOUNDARY), (2.0, DomainClass.INTERIOR)],
)
def test_domain_classes(single_atom, lam, expected):
    assert classify_domain(single_atom, Decision([1.0], lam)) is expected


def test_f_delta_is_infinite_outside_domain(single_atom):
    assert f_delta(single_atom, Decision([1.0], 0.4)) == math.inf
    assert f_delta(single_atom, Decision([1.0], 0.5)) == math.inf
    with pytest.raises(InfeasibleDomainError):
        inner_maximize(single_atom, Decision([1.0], 0.4), 0)


def test_closed_form_check_passes():
    report = check_squared_closed_form(instances=300, seed=7)
    assert report.passed, report.to_json()


def test_closed_form_matches_bisection_on_regression(regression_plane, rng):
    for _ in range(20):
        beta = rng.uniform(-1.0, 1.0, 2)
        theta = Decision(beta, 0.2 * float(beta @ beta) + rng.uniform(0.05, 2.0))
        fast = solve_inner(regression_plane, theta).lrob
        exact = solve_inner(regression_plane, theta, method="closed_form").lrob
        assert_allclose(fast, exact, atol=1e-9)
        assert squared_loss_lrob_closed_form(regression_plane, theta, 3) == pytest.approx(exact[3])


def test_closed_form_needs_quadratic_loss(logistic_plane):
    with pytest.raises(ConfigurationError, match="closed form"):
        solve_inner(logistic_plane, Decision([0.3, 0.1], 1.0), method="closed_form")


def test_hinge_matches_closed_form(rng):
    data = SampleSet(rng.standard_normal((12, 3)), rng.choice([-1.0, 1.0], 12))
    problem = DroProblem(data, identity_cost(3), make_hinge_loss(), 0.05, 2.0)
    for _ in range(10):
        theta = Decision(rng.uniform(-1, 1, 3), rng.uniform(0.05, 3.0))
        for row in range(data.n):
            fast = inner_maximize(problem, theta, row).lrob
            assert fast == pytest.approx(lrob_hinge_closed_form(problem, theta, row), abs=1e-10)


def test_kink_needs_subgradient():
    problem = DroProblem(SampleSet([[1.0]], [1.0]), identity_cost(1), make_hinge_loss(), 0.04, 2.0)
    theta = Decision([1.0], 1.0)
    at_kink = InnerSolution(g=0.0, lrob=0.2, x_tilde=np.array([1.0]), residual=0.0, cuts_used=0, a=1.0)
    with pytest.raises(KinkError):
        grad_lrob(problem, theta, 0, at_kink)
    draws = [subgrad_lrob(problem, theta, 0, at_kink, np.random.default_rng(k)).lprime_choice for k in range(20)]
    assert all(-1.0 <= d <= 0.0 for d in draws)
    assert len(set(draws)) > 1


def test_nonconcave_regime_falls_back_to_grid():
    # λ′_thr = (M/2)√δ·a = 0.125 · 1 · 16 = 2
    problem = DroProblem(SampleSet([[1.0]], [1.0]), identity_cost(1), make_logistic_loss(), 1.0, 5.0)
    theta = Decision([4.0], 1.0)
    with pytest.raises(NonconcaveRegimeError):
        inner_maximize(problem, theta, 0)
    batch = solve_inner(problem, theta)
    assert not batch.certified[0]
    fallback = fallback_maximize(problem, theta, 0)
    _, reference = grid_inner_max(problem, theta, 0)
    assert fallback.lrob == pytest.approx(reference, abs=1e-8)
    assert batch.lrob[0] == pytest.approx(reference, abs=1e-8)


def square_minus_cosine():
    # callbacks ignore y and return 0-d values for scalar u
    return make_smooth_loss(
        "square-minus-cosine",
        lambda u, y: np.asarray(u) ** 2 - np.cos(u),
        lambda u, y: 2.0 * np.asarray(u) + np.sin(u),
        lambda u, y: 2.0 + np.cos(u),
        kappa=1.0,
        M=3.0,
    )


def test_user_supplied_smooth_loss():
    loss = square_minus_cosine()
    problem = DroProblem(SampleSet([[0.5], [-0.2]]), identity_cost(1), loss, 0.09, 2.0)
    theta = Decision([1.0], 1.0)
    for row in range(2):
        fast = inner_maximize(problem, theta, row)
        _, reference = grid_inner_max(problem, theta, row)
        assert fast.lrob == pytest.approx(reference, abs=1e-8)
        assert fast.residual < 1e-9


def test_large_lambda_recovers_nonrobust_loss(logistic_plane):
    theta = Decision([0.6, -0.4], 1e6)
    value = f_delta(logistic_plane, theta) - theta.lam * logistic_plane.sqrt_delta
    assert value == pytest.approx(nonrobust_objective(logistic_plane, theta.beta), abs=1e-6)


def test_logistic_gradient_check_passes():
    report = check_logistic_gradient(samples=5)
    assert report.passed, report.to_json()


def test_regression_gradient_matches_differences(regression_plane):
    theta = Decision([0.5, -0.3], 1.0)
    analytic = full_gradient(regression_plane, theta)
    d_beta, d_lambda = fd_gradient(regression_plane, theta)
    numeric = np.append(d_beta, d_lambda)
    assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(numeric)


def square_minus_cosine_peak(epsilon: float) -> float:
    # with x = 0, β = 1, δ = 1: F(γ) = −εγ² − cos γ + 1 + ε, maximized near γ = ±π
    gamma = np.linspace(math.pi - 0.2, math.pi + 0.2, 400_001)
    return float(np.max(-epsilon * gamma**2 - np.cos(gamma) + 1.0 + epsilon))


@pytest.mark.parametrize(
    "epsilon",
    [1e-2, 1e-4, pytest.param(1e-6, marks=pytest.mark.slow)],
)
def test_fallback_just_above_growth_threshold(epsilon):
    # λ_thr = κ√δa = 1 and λ′_thr = (M/2)√δa = 1.5, so λ = 1 + ε is nonconcave
    problem = DroProblem(SampleSet([[0.0]]), identity_cost(1), square_minus_cosine(), 1.0, 5.0)
    theta = Decision([1.0], 1.0 + epsilon)
    assert classify_domain(problem, theta) == DomainClass.INTERIOR

    batch = solve_inner(problem, theta)
    assert not batch.certified[0]
    expected = square_minus_cosine_peak(epsilon)
    assert batch.lrob[0] == pytest.approx(expected, abs=1e-6)
    assert abs(abs(batch.g[0]) - math.pi) < 0.1

    fallback = fallback_maximize(problem, theta, 0)
    assert fallback.lrob == pytest.approx(expected, abs=1e-6)
    assert fallback.residual < 1e-8
