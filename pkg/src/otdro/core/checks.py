"""Named oracle checks run by ``ot-dro check``.

Every check builds its own small seeded instance, compares a fast path against an
independent reference and returns an OracleReport.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from otdro.core.datasets import make_classification_sample
from otdro.core.dro_dataclasses import ConstantsBundle, OracleReport, RunTrace, StepSchedule
from otdro.core.dual_objective import (
    f_delta,
    full_gradient,
    inner_maximize,
    squared_loss_lrob_closed_form,
)
from otdro.core.errors import ConfigurationError
from otdro.core.losses import make_hinge_loss, make_logistic_loss, make_squared_loss
from otdro.core.models import Decision, DroProblem, SampleSet, identity_cost
from otdro.core.optimizer import envelope_constant, rate_diagnostic, sgd_nonsmooth, solve_lambda_star
from otdro.core.oracle import (
    fd_gradient,
    fd_hessian,
    grid_inner_max,
    grid_min_fdelta,
    grid_project,
    hessian_probe,
    nonrobust_objective,
    primal_bound,
)
from otdro.core.regions import build_constants, estimate_L_bounds, project_U_eta, project_W
from otdro.core.worstcase import worst_case

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleCheck:
    name: str
    description: str
    run: Callable[[], OracleReport]


# ------------------------------------------------------------
# Instances
# ------------------------------------------------------------


def single_atom_problem(delta: float = 0.25, r_beta: float = 2.0) -> DroProblem:
    """Squared loss on the single atom x = 0, y = 1 with A = 1."""
    return DroProblem(SampleSet([[0.0]], [1.0]), identity_cost(1), make_squared_loss(), delta, r_beta)


def logistic_problem(n: int, d: int, delta: float, seed: int = 0, r_beta: float = 1.0) -> DroProblem:
    data = make_classification_sample(n, d, 1.0, np.random.default_rng(seed))
    return DroProblem(data, identity_cost(d), make_logistic_loss(), delta, r_beta)


LINE_POINTS = (-2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 0.3, -0.3)
LINE_LABELS = (-1.0, -1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0)
HINGE_ETA = 0.01
HINGE_ITERATIONS = 20_000
RATE_WINDOW = (1_000, HINGE_ITERATIONS)


def line_problem(loss, delta: float = 0.01, r_beta: float = 4.0) -> DroProblem:
    """Eight overlapping labelled points on a line."""
    data = SampleSet(np.array(LINE_POINTS)[:, None], LINE_LABELS)
    return DroProblem(data, identity_cost(1), loss, delta, r_beta)


def flat_slice_problem() -> DroProblem:
    """Least squares with no data along e₃: the empirical loss ignores β₃."""
    data = SampleSet([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [3.0, -3.0])
    return DroProblem(data, identity_cost(3), make_squared_loss(), 0.01, 1.0)


def sample_in_W(consts: ConstantsBundle, d: int, count: int, rng: np.random.Generator) -> list[Decision]:
    """Decisions spread over 𝕎, kept a little inside its edges."""
    thetas = []
    for _ in range(count):
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        beta = direction * consts.r_beta * rng.uniform(0.1, 0.9)
        norm = float(np.linalg.norm(beta))
        low, high = consts.K1 * norm, consts.lambda_cap
        thetas.append(Decision(beta, low + (high - low) * rng.uniform(0.05, 0.95)))
    return thetas


# ------------------------------------------------------------
# Checks
# ------------------------------------------------------------


def check_single_atom_lambda() -> OracleReport:
    star = solve_lambda_star(single_atom_problem(), np.array([1.0]), tol=1e-12)
    return OracleReport.compare("lambda_star", 1.5, star.lam, 1e-6, delta=0.25)


def check_single_atom_value() -> OracleReport:
    problem = single_atom_problem()
    star = solve_lambda_star(problem, np.array([1.0]), tol=1e-12)
    return OracleReport.compare("f_delta", 2.25, f_delta(problem, Decision([1.0], star.lam)), 1e-6, delta=0.25)


def check_single_atom_transport() -> OracleReport:
    transport = worst_case(single_atom_problem(), np.array([1.0]), tol=1e-12)
    return OracleReport.compare("x_star", -0.5, float(transport.x_star[0, 0]), 1e-6, delta=0.25)


def check_squared_closed_form(instances: int = 200, seed: int = 1) -> OracleReport:
    rng = np.random.default_rng(seed)
    worst = (0.0, 0.0, -1.0)
    for _ in range(instances):
        d = int(rng.integers(1, 5))
        data = SampleSet(rng.standard_normal((1, d)), rng.standard_normal(1))
        problem = DroProblem(data, identity_cost(d), make_squared_loss(), float(rng.uniform(0.01, 0.5)), 10.0)
        beta = rng.standard_normal(d)
        floor = problem.sqrt_delta * float(beta @ beta)
        theta = Decision(beta, floor * (1.0 + rng.uniform(0.05, 3.0)))
        fast = inner_maximize(problem, theta, 0).lrob
        exact = squared_loss_lrob_closed_form(problem, theta, 0)
        if abs(fast - exact) > worst[2]:
            worst = (exact, fast, abs(fast - exact))
    return OracleReport.compare("squared closed form", worst[0], worst[1], 1e-8, instances=instances)


def check_logistic_gradient(samples: int = 10, seed: int = 2) -> OracleReport:
    problem = logistic_problem(50, 5, 0.01, seed)
    consts = build_constants(problem, estimate_L_bounds(problem, seed=seed))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for theta in sample_in_W(consts, 5, samples, rng):
        analytic = full_gradient(problem, theta, consts=consts)
        d_beta, d_lambda = fd_gradient(problem, theta)
        numeric = np.append(d_beta, d_lambda)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)))
    return OracleReport.compare("relative gradient error", 0.0, worst, 1e-5, samples=samples)


def check_worst_case_budget(seed: int = 3) -> OracleReport:
    problem = logistic_problem(64, 2, 0.01, seed)
    transport = worst_case(problem, np.array([0.8, -0.3]))
    return OracleReport.compare(
        "E[c(X, X*)]", problem.delta, transport.budget, 1e-6 * problem.delta, regime=transport.regime.value
    )


def check_complementary_slackness(seed: int = 3) -> OracleReport:
    problem = logistic_problem(64, 2, 0.01, seed)
    transport = worst_case(problem, np.array([0.8, -0.3]))
    return OracleReport.compare("E[loss(X*)]", transport.dual_value, transport.expected_loss, 1e-6)


def check_duality_gap() -> OracleReport:
    problem = single_atom_problem()
    lower = primal_bound(problem, np.array([1.0]), np.linspace(-2.0, 2.0, 401))
    return OracleReport.compare("primal bound", 2.25, lower, 1e-3, weak_duality=bool(lower <= 2.25 + 1e-9))


def check_projection_W(points: int = 50, seed: int = 4) -> OracleReport:
    K1, K2, radius = 0.5, 2.0, 1.0
    consts = ConstantsBundle(
        L_lower=1.0, L_upper=16.0, K1=K1, K2=K2, K2_table=K2, delta0=1.0, delta1=None,
        phi_min=1.0, kappa0=0.5, estimated=False, delta=0.01, r_beta=radius,
    )
    constraints = [
        lambda p: p[:, 1] - K1 * p[:, 0],
        lambda p: K2 * radius - p[:, 1],
        lambda p: radius - p[:, 0],
        lambda p: p[:, 0],
    ]
    rng = np.random.default_rng(seed)
    worst = (0.0, 0.0, -1.0)
    for _ in range(points):
        point = np.array([rng.uniform(0.0, 2.5), rng.uniform(-1.5, 3.5)])
        fast = project_W(Decision(point[:1], point[1]), consts, radius).as_vector()
        reference = grid_project(point, constraints, [(0.0, radius), (0.0, K2 * radius)])
        error = float(np.linalg.norm(fast - reference))
        if error > worst[2]:
            worst = (float(np.linalg.norm(reference - point)), float(np.linalg.norm(fast - point)), error)
    return OracleReport.compare("distance to W", worst[0], worst[1], 1e-6, points=points)


def check_inner_grid(seed: int = 5) -> OracleReport:
    problem = logistic_problem(16, 2, 0.04, seed)
    theta = Decision([0.5, -0.2], 0.4)
    worst = (0.0, 0.0, -1.0)
    for row in range(problem.data.n):
        fast = inner_maximize(problem, theta, row).lrob
        _, reference = grid_inner_max(problem, theta, row, points=10_001)
        if abs(fast - reference) > worst[2]:
            worst = (reference, fast, abs(fast - reference))
    return OracleReport.compare("inner maximum", worst[0], worst[1], 1e-8)


def check_projection_U_eta(points: int = 50, seed: int = 7, eta: float = 0.1) -> OracleReport:
    problem = single_atom_problem(delta=0.25, r_beta=1.0)
    s, radius = problem.sqrt_delta, problem.r_beta
    constraints = [
        lambda p: p[:, 1] - (s * p[:, 0] ** 2 + eta),
        lambda p: radius - p[:, 0],
        lambda p: radius + p[:, 0],
    ]
    rng = np.random.default_rng(seed)
    worst = (0.0, 0.0, -1.0)
    for _ in range(points):
        point = np.array([rng.uniform(-1.5 * radius, 1.5 * radius), rng.uniform(-1.0, 3.0)])
        fast = project_U_eta(Decision(point[:1], point[1]), problem, eta).as_vector()
        reference = grid_project(point, constraints, [(-radius, radius), (eta, 3.5)])
        error = float(np.linalg.norm(fast - reference))
        if error > worst[2]:
            worst = (float(np.linalg.norm(reference - point)), float(np.linalg.norm(fast - point)), error)
    return OracleReport.compare("distance to U_eta", worst[0], worst[1], 1e-6, points=points, eta=eta)


def _flat_slice_points(problem: DroProblem, count: int, seed: int) -> list[Decision]:
    """Points of 𝕍 with β₃ = 0."""
    consts = build_constants(problem, estimate_L_bounds(problem, seed=seed))
    rng = np.random.default_rng(seed)
    thetas = []
    for _ in range(count):
        angle = rng.uniform(0.0, 2.0 * math.pi)
        norm = problem.r_beta * rng.uniform(0.2, 0.9)
        beta = np.array([math.cos(angle), math.sin(angle), 0.0]) * norm
        lam = norm * (consts.K1 + (consts.K2 - consts.K1) * rng.uniform(0.05, 0.95))
        thetas.append(Decision(beta, lam))
    return thetas


def check_hessian_witness(points: int = 20, seed: int = 6) -> OracleReport:
    problem = flat_slice_problem()
    # the β₃ and λ directions
    directions = [[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
    thetas = _flat_slice_points(problem, points, seed)
    curvature = hessian_probe(problem, None, thetas, h=1e-3, directions=directions)
    smallest = float(np.min(curvature.min_eigenvalues)) if curvature.min_eigenvalues.size else math.nan
    return OracleReport.above("min FD eigenvalue of f_delta", 0.0, smallest, skipped=curvature.skipped)


def check_hessian_flat_baseline(points: int = 20, seed: int = 6) -> OracleReport:
    problem = flat_slice_problem()

    def loss(beta):
        return nonrobust_objective(problem, beta)

    largest = max(
        abs(float(fd_hessian(loss, theta.beta, 1e-3, [[0.0, 0.0, 1.0]])[0, 0]))
        for theta in _flat_slice_points(problem, points, seed)
    )
    return OracleReport.at_most("non-robust FD curvature along e3", 1e-8, largest)


@functools.cache
def _hinge_run() -> tuple[RunTrace, float, float]:
    """Full-batch nonsmooth run on the hinge line instance, its grid f* and the η√δ floor."""
    problem = line_problem(make_hinge_loss())
    trace = sgd_nonsmooth(
        problem,
        StepSchedule(0.5, 0.5),
        HINGE_ETA,
        xi=1.0,
        iterations=HINGE_ITERATIONS,
        batch_size=problem.data.n,
    )
    _, f_star = grid_min_fdelta(
        problem, [(-4.0, 4.0)], (1e-3, 3.0), objective=lambda theta: f_delta(problem, theta)
    )
    return trace, f_star, HINGE_ETA * problem.sqrt_delta


def check_nonsmooth_rate() -> OracleReport:
    trace, f_star, _ = _hinge_run()
    fit = rate_diagnostic(trace, f_star, RATE_WINDOW)
    return OracleReport.at_most("log-log gap slope", -0.4, fit.slope, used=fit.used, excluded=fit.excluded)


def check_nonsmooth_envelope() -> OracleReport:
    trace, f_star, floor = _hinge_run()
    C = envelope_constant(trace, f_star, floor, RATE_WINDOW)
    final = trace.records[-1]
    ceiling = floor + C / math.sqrt(final.k)
    return OracleReport.at_most("terminal gap", ceiling, final.f_delta - f_star, C=C, floor=floor)


CHECKS: tuple[OracleCheck, ...] = (
    OracleCheck("single-atom-lambda", "λ* on the single-atom instance", check_single_atom_lambda),
    OracleCheck("single-atom-value", "f_δ at λ* on the single-atom instance", check_single_atom_value),
    OracleCheck("single-atom-transport", "X* on the single-atom instance", check_single_atom_transport),
    OracleCheck("squared-closed-form", "bisection vs squared-loss closed form", check_squared_closed_form),
    OracleCheck("logistic-gradient", "analytic vs finite-difference gradient", check_logistic_gradient),
    OracleCheck("worst-case-budget", "worst-case transport spends exactly δ", check_worst_case_budget),
    OracleCheck("complementary-slackness", "E[ℓ(βᵀX*)] equals f_δ at λ*", check_complementary_slackness),
    OracleCheck("duality-gap", "transport LP vs dual value", check_duality_gap),
    OracleCheck("projection-W", "Π_𝕎 vs grid projection", check_projection_W),
    OracleCheck("projection-U-eta", "Π_𝕌η vs grid projection", check_projection_U_eta),
    OracleCheck("inner-grid", "bisection vs dense-grid inner maximum", check_inner_grid),
    OracleCheck("hessian-witness", "f_δ curves where the data is flat", check_hessian_witness),
    OracleCheck("hessian-flat-baseline", "empirical loss is flat along e₃", check_hessian_flat_baseline),
    OracleCheck("nonsmooth-rate", "hinge gap slope, averaged run", check_nonsmooth_rate),
    OracleCheck("nonsmooth-envelope", "hinge terminal gap under η√δ + C·k^(-1/2)", check_nonsmooth_envelope),
)


def select_checks(names: Optional[Iterable[str]] = None) -> tuple[OracleCheck, ...]:
    if not names:
        return CHECKS
    wanted = list(names)
    known = {check.name: check for check in CHECKS}
    unknown = [name for name in wanted if name not in known]
    if unknown:
        raise ConfigurationError(f"unknown check(s) {unknown!r}; expected some of {sorted(known)}")
    return tuple(known[name] for name in wanted)


def run_checks(names: Optional[Iterable[str]] = None) -> list[tuple[str, OracleReport]]:
    reports = []
    for check in select_checks(names):
        try:
            report = check.run()
        except Exception as exc:
            logger.warning("%s raised %r", check.name, exc)
            report = OracleReport.crashed(exc)
        level = logging.INFO if report.passed else logging.WARNING
        logger.log(level, "%s: |%.3g| against tolerance %.3g", check.name, report.abs_error, report.tolerance)
        reports.append((check.name, report))
    return reports
