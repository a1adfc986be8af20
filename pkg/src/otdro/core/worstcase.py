from __future__ import annotations

import logging
import math
from typing import Optional, Sequence

import numpy as np

from otdro.core.dro_dataclasses import (
    ConstantsBundle,
    Randomization,
    StaticsTrace,
    WorstCaseRegime,
    WorstCaseTransport,
)
from otdro.core.dual_objective import (
    ORACLE_CUTS,
    MAX_EXPANSIONS,
    F_values,
    row_values,
    directions,
    solve_inner,
)
from otdro.core.errors import ConfigurationError, UnboundedIntervalError
from otdro.core.models import Decision, DroProblem, FloatArray
from otdro.core.optimizer import solve_lambda_star
from otdro.core.regions import lambda_thr, lambda_thr_prime

logger = logging.getLogger(__name__)

DEFAULT_SELECTOR_POINTS = 100_001
COLLAPSE_RTOL = 1e-6


def worst_case(
    problem: DroProblem,
    beta: FloatArray,
    tol: float = 1e-10,
    consts: Optional[ConstantsBundle] = None,
    grid_points: int = DEFAULT_SELECTOR_POINTS,
) -> WorstCaseTransport:
    """Worst-case transport X* = X + √δ·G·A(X)⁻¹β attaining the robust objective at β."""
    beta = np.asarray(beta, dtype=np.float64)
    data = problem.data
    idx = np.arange(data.n)
    dirs = directions(problem, beta, idx)

    if not np.any(beta):
        base_loss = float(np.mean(problem.loss.value(np.zeros(data.n), data.label_values())))
        return WorstCaseTransport(
            delta=problem.delta,
            regime=WorstCaseRegime.CONSTANT_LOSS,
            lam=0.0,
            G=np.zeros(data.n),
            x_star=np.array(data.points),
            directions=dirs,
            budget=0.0,
            expected_loss=base_loss,
            dual_value=base_loss,
        )

    star = solve_lambda_star(problem, beta, tol, consts)
    threshold = lambda_thr(problem, beta)
    if threshold > 0 and star.lam <= threshold * (1.0 + COLLAPSE_RTOL):
        logger.warning(
            "λ* collapsed onto λ_thr=%.6g at δ=%.6g; the supremum is not attained", threshold, problem.delta
        )
        nan = np.full(data.n, math.nan)
        return WorstCaseTransport(
            delta=problem.delta,
            regime=WorstCaseRegime.NONEXISTENT,
            lam=star.lam,
            G=nan,
            x_star=np.full(data.points.shape, math.nan),
            directions=dirs,
            budget=math.nan,
            expected_loss=math.nan,
            dual_value=math.nan,
            certified=False,
        )

    theta = Decision(beta, star.lam)
    if star.lam > lambda_thr_prime(problem, beta):
        batch = solve_inner(problem, theta, None, ORACLE_CUTS, consts)
        labels = data.label_values()
        return WorstCaseTransport(
            delta=problem.delta,
            regime=WorstCaseRegime.UNIQUE,
            lam=star.lam,
            G=batch.g,
            x_star=batch.x_tilde,
            directions=dirs,
            budget=problem.delta * float(np.mean(batch.g**2 * batch.a)),
            expected_loss=float(np.mean(problem.loss.value(batch.u_tilde, labels))),
            dual_value=float(np.mean(batch.lrob)),
            certified=bool(batch.certified.all()) and star.at_bound is None,
        )
    return _randomized(problem, theta, dirs, grid_points)


def mixing_weight(c_low: float, c_high: float) -> float:
    """P(pick G₋) so that the mixed E[G²a] equals one."""
    if c_high - c_low <= 1e-15 * max(1.0, abs(c_high)):
        return 1.0
    return float(np.clip((c_high - 1.0) / (c_high - c_low), 0.0, 1.0))


def extreme_maximizers(
    problem: DroProblem, theta: Decision, grid_points: int = DEFAULT_SELECTOR_POINTS
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Per-sample (G₋, G₊, value): the maximizers of F with smallest and largest γ²."""
    idx = np.arange(problem.data.n)
    _, labels, _, a, u0 = row_values(problem, theta.beta, idx)
    s = problem.sqrt_delta
    g_minus = np.zeros(idx.size)
    g_plus = np.zeros(idx.size)
    values = np.zeros(idx.size)
    for row in idx:
        y = labels[row : row + 1]
        if a[row] == 0.0:
            values[row] = float(F_values(problem, np.zeros(1), u0[row], 0.0, theta.lam, y)[0])
            continue
        epsilon = theta.lam / (s * a[row]) - problem.loss.kappa
        if epsilon <= 0:
            raise UnboundedIntervalError(f"λ={theta.lam!r} leaves F unbounded for sample {row}")
        half = (1.0 + (1.0 + abs(u0[row])) / epsilon) / (s * a[row])
        for _ in range(MAX_EXPANSIONS):
            grid = np.linspace(-half, half, grid_points)
            F = F_values(problem, grid, u0[row], a[row], theta.lam, y)
            top = float(np.max(F))
            near = np.flatnonzero(F >= top - 1e-9 * (1.0 + abs(top)))
            if near[0] > 0 and near[-1] < grid_points - 1:
                break
            half *= 2.0
        chosen = grid[near]
        g_minus[row] = chosen[np.argmin(chosen**2)]
        g_plus[row] = chosen[np.argmax(chosen**2)]
        values[row] = top
    return g_minus, g_plus, values


def _randomized(problem, theta, dirs, grid_points) -> WorstCaseTransport:
    data = problem.data
    labels = data.label_values()
    a = np.einsum("ij,j->i", dirs, theta.beta)
    s = problem.sqrt_delta
    g_minus, g_plus, values = extreme_maximizers(problem, theta, grid_points)
    c_low = float(np.mean(g_minus**2 * a))
    c_high = float(np.mean(g_plus**2 * a))
    p = mixing_weight(c_low, c_high)
    if not c_low - 1e-9 <= 1.0 <= c_high + 1e-9:
        logger.warning("randomized regime: E[G²a] range [%.6g, %.6g] misses 1", c_low, c_high)
    x_minus = data.points + (s * g_minus)[:, None] * dirs
    x_plus = data.points + (s * g_plus)[:, None] * dirs
    loss_minus = float(np.mean(problem.loss.value(x_minus @ theta.beta, labels)))
    loss_plus = float(np.mean(problem.loss.value(x_plus @ theta.beta, labels)))
    logger.warning(
        "worst case at δ=%.6g is randomized; maximizers selected on a %d-point grid",
        problem.delta, grid_points,
    )
    return WorstCaseTransport(
        delta=problem.delta,
        regime=WorstCaseRegime.RANDOMIZED,
        lam=theta.lam,
        G=g_plus,
        x_star=x_plus,
        directions=dirs,
        budget=problem.delta * (p * c_low + (1.0 - p) * c_high),
        expected_loss=p * loss_minus + (1.0 - p) * loss_plus,
        dual_value=float(np.mean(values)),
        certified=False,
        randomization=Randomization(g_minus, g_plus, p, grid_points),
    )


def _cosines(transport: WorstCaseTransport, points: FloatArray) -> FloatArray:
    moves = transport.x_star - points
    move_norm = np.linalg.norm(moves, axis=1)
    dir_norm = np.linalg.norm(transport.directions, axis=1)
    moving = (move_norm > 0) & (dir_norm > 0)
    cosines = np.ones(points.shape[0])
    cosines[moving] = np.abs(np.einsum("ij,ij->i", moves[moving], transport.directions[moving])) / (
        move_norm[moving] * dir_norm[moving]
    )
    return cosines


def comparative_statics(
    problem: DroProblem,
    beta: FloatArray,
    delta_grid: Sequence[float],
    tol: float = 1e-10,
    delta1: Optional[float] = None,
) -> StaticsTrace:
    """Worst-case transports along a δ grid with monotonicity and straight-line checks."""
    deltas = sorted(float(d) for d in delta_grid)
    if not deltas or deltas[0] <= 0:
        raise ConfigurationError(f"delta grid must be nonempty and positive, got {list(delta_grid)!r}")
    flagged = tuple(d for d in deltas if delta1 is not None and d >= delta1)
    if flagged:
        logger.warning("comparative statics not guaranteed at δ >= δ₁=%.6g: %s", delta1, flagged)

    points = problem.data.points
    transports = tuple(worst_case(problem.with_delta(d), beta, tol) for d in deltas)
    violations = 0
    min_cosine = 1.0
    previous: Optional[FloatArray] = None
    for transport in transports:
        if transport.regime is WorstCaseRegime.NONEXISTENT:
            previous = None
            continue
        displacement = np.linalg.norm(transport.x_star - points, axis=1)
        if previous is not None:
            violations += int(np.count_nonzero(displacement < previous - 1e-12 * (1.0 + previous)))
        previous = displacement
        min_cosine = min(min_cosine, float(np.min(_cosines(transport, points))))
    if violations:
        logger.warning("%d per-sample displacement(s) shrank as δ grew", violations)
    return StaticsTrace(transports, violations, min_cosine, flagged)
