"""Brute-force reference computations for validating the fast paths.

The inner maximization here is a dense grid with zoom refinement built directly on F; it
never goes through the bisection solver.
"""

from __future__ import annotations

import itertools
import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy import optimize

from otdro.core.dro_dataclasses import ConstantsBundle, HessianProbe
from otdro.core.dual_objective import f_delta
from otdro.core.errors import ConfigurationError, InfeasibleDomainError, NumericalError
from otdro.core.models import Decision, DroProblem, FloatArray
from otdro.core.regions import lambda_thr

logger = logging.getLogger(__name__)

FD_CUTS = 80
ZOOM_LEVELS = 3
MAX_DOUBLINGS = 64


# ------------------------------------------------------------
# Inner maximization by grid
# ------------------------------------------------------------


def _F_grid(problem: DroProblem, gammas: FloatArray, u0, a, lam, y) -> FloatArray:
    s = problem.sqrt_delta
    return problem.loss.value(u0 + gammas * s * a, y) - lam * s * (gammas * gammas * a - 1.0)


def _grid_rows(problem: DroProblem, theta: Decision, points: int) -> tuple[FloatArray, FloatArray]:
    """Grid maximizer and value of F for every sample at θ."""
    data = problem.data
    beta = theta.beta
    if np.any(beta) and theta.lam <= lambda_thr(problem, beta):
        raise InfeasibleDomainError(f"λ={theta.lam!r} is not above λ_thr; F is unbounded")
    u0 = (data.points @ beta)[:, None]
    a = np.array(
        [beta @ problem.cost.solve(beta, i, data.points[i]) for i in range(data.n)]
    )[:, None]
    y = data.label_values()[:, None]
    if not np.any(beta):
        return np.zeros(data.n), _F_grid(problem, np.zeros((data.n, 1)), u0, a, theta.lam, y)[:, 0]

    unit = np.linspace(-1.0, 1.0, points)[None, :]
    half = np.full((data.n, 1), 1.0 / max(theta.lam, 1e-12) + 1.0)
    for _ in range(MAX_DOUBLINGS):
        values = _F_grid(problem, half * unit, u0, a, theta.lam, y)
        top = np.argmax(values, axis=1)
        edge = (top == 0) | (top == points - 1)
        if not edge.any():
            break
        half[edge] *= 2.0
    else:
        raise NumericalError("grid maximum keeps escaping the search interval")

    rows = np.arange(data.n)
    step = 2.0 * half[:, 0] / (points - 1)
    centre = (half * unit)[rows, top]
    for _ in range(ZOOM_LEVELS):
        gammas = centre[:, None] + 2.0 * step[:, None] * unit
        values = _F_grid(problem, gammas, u0, a, theta.lam, y)
        top = np.argmax(values, axis=1)
        centre = gammas[rows, top]
        step = 4.0 * step / (points - 1)

    # one Newton step on a three-point stencil
    h = np.maximum(step, 1e-12 * (1.0 + np.abs(centre)))
    f0 = _F_grid(problem, centre[:, None], u0, a, theta.lam, y)[:, 0]
    fp = _F_grid(problem, (centre + h)[:, None], u0, a, theta.lam, y)[:, 0]
    fm = _F_grid(problem, (centre - h)[:, None], u0, a, theta.lam, y)[:, 0]
    curvature = fp - 2.0 * f0 + fm
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(curvature < 0, -0.5 * h * (fp - fm) / curvature, 0.0)
    shift = np.clip(shift, -h, h)
    polished = centre + shift
    f1 = _F_grid(problem, polished[:, None], u0, a, theta.lam, y)[:, 0]
    better = f1 >= f0
    return np.where(better, polished, centre), np.where(better, f1, f0)


def grid_inner_max(
    problem: DroProblem, theta: Decision, x_index: int, points: int = 100_001
) -> tuple[float, float]:
    """(g, ℓ_rob) for one sample by dense grid, zoom and a final Newton step."""
    if not 0 <= x_index < problem.data.n:
        raise ConfigurationError(f"sample index {x_index!r} out of range")
    g, values = _grid_rows(problem, theta, points)
    return float(g[x_index]), float(values[x_index])


def oracle_fdelta(problem: DroProblem, theta: Decision, points: int = 401) -> float:
    if theta.lam < 0:
        return math.inf
    try:
        return float(np.mean(_grid_rows(problem, theta, points)[1]))
    except InfeasibleDomainError:
        return math.inf


def nonrobust_objective(problem: DroProblem, beta: ArrayLike) -> float:
    """E_n[ℓ(βᵀX; Y)]."""
    data = problem.data
    return float(np.mean(problem.loss.value(data.points @ np.asarray(beta, dtype=np.float64), data.label_values())))


# ------------------------------------------------------------
# Derivatives
# ------------------------------------------------------------


def fd_gradient(
    problem: DroProblem, theta: Decision, h: Optional[float] = None
) -> tuple[FloatArray, float]:
    """Central differences of f_δ with 80-cut inner solves."""
    x = theta.as_vector()
    h = 1e-5 * (1.0 + float(np.linalg.norm(x))) if h is None else h

    def f(vector):
        return f_delta(problem, Decision.from_vector(vector), FD_CUTS)

    grad = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        grad[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad[:-1], float(grad[-1])


def fd_hessian(
    fun: Callable[[FloatArray], float],
    x: ArrayLike,
    h: float,
    directions: Optional[ArrayLike] = None,
) -> FloatArray:
    """Central-difference Hessian of ``fun`` restricted to span(directions)."""
    x = np.asarray(x, dtype=np.float64)
    dirs = np.eye(x.size) if directions is None else np.atleast_2d(np.asarray(directions, dtype=np.float64))
    m = dirs.shape[0]
    hessian = np.zeros((m, m))
    for k in range(m):
        for l in range(k, m):
            uk, ul = h * dirs[k], h * dirs[l]
            value = (fun(x + uk + ul) - fun(x + uk - ul) - fun(x - uk + ul) + fun(x - uk - ul)) / (4.0 * h * h)
            hessian[k, l] = hessian[l, k] = value
    return hessian


def hessian_probe(
    problem: DroProblem,
    consts: Optional[ConstantsBundle],
    theta_samples: Sequence[Decision],
    h: float = 1e-4,
    directions: Optional[ArrayLike] = None,
) -> HessianProbe:
    """Minimum eigenvalue of the FD Hessian of f_δ at each sample, plus a chord modulus.

    Samples whose stencil leaves the effective domain are skipped and counted.
    """

    def f(vector):
        return f_delta(problem, Decision.from_vector(vector), FD_CUTS, consts)

    eigenvalues = []
    skipped = 0
    for theta in theta_samples:
        hessian = fd_hessian(f, theta.as_vector(), h, directions)
        if not np.all(np.isfinite(hessian)):
            skipped += 1
            continue
        eigenvalues.append(float(np.linalg.eigvalsh(hessian)[0]))
    if skipped:
        logger.info("hessian_probe skipped %d sample(s) near the domain boundary", skipped)

    modulus = math.inf
    vectors = [t.as_vector() for t in theta_samples]
    for left, right in zip(vectors, vectors[1:]):
        gap = float(np.sum((left - right) ** 2))
        if gap == 0.0:
            continue
        ends = 0.5 * f(left) + 0.5 * f(right)
        middle = f(0.5 * (left + right))
        if math.isfinite(ends) and math.isfinite(middle):
            modulus = min(modulus, 8.0 * (ends - middle) / gap)
    return HessianProbe(np.array(eigenvalues), modulus, skipped)


# ------------------------------------------------------------
# Minimization, projection and duality oracles
# ------------------------------------------------------------


def grid_min_fdelta(
    problem: DroProblem,
    beta_box: Sequence[tuple[float, float]],
    lambda_interval: tuple[float, float],
    resolution: int = 21,
    levels: int = 8,
    objective: Optional[Callable[[Decision], float]] = None,
) -> tuple[Decision, float]:
    """Nested-grid minimization of f_δ over box ∩ {‖β‖ ≤ R_β}.

    Each level re-centres a grid of the same resolution on the incumbent with a window of
    two cells either side; the incumbent never gets worse.
    """
    if len(beta_box) != problem.data.d:
        raise ConfigurationError(f"beta_box needs {problem.data.d} intervals, got {len(beta_box)}")
    objective = objective or (lambda theta: oracle_fdelta(problem, theta))
    bounds = np.array([*beta_box, lambda_interval], dtype=np.float64)
    lows, highs = bounds[:, 0].copy(), bounds[:, 1].copy()
    best_theta, best_value = None, math.inf
    for _ in range(levels):
        axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(lows, highs)]
        for vector in itertools.product(*axes):
            theta = Decision.from_vector(np.array(vector))
            if theta.beta_norm > problem.r_beta * (1.0 + 1e-12) or theta.lam < 0:
                continue
            value = objective(theta)
            if value < best_value:
                best_theta, best_value = theta, value
        if best_theta is None:
            raise ConfigurationError("grid contains no decision inside the ball with λ >= 0")
        cell = (highs - lows) / (resolution - 1)
        centre = best_theta.as_vector()
        lows = np.maximum(bounds[:, 0], centre - 2.0 * cell)
        highs = np.minimum(bounds[:, 1], centre + 2.0 * cell)
    return best_theta, best_value


def grid_project(
    point: ArrayLike,
    constraints: Sequence[Callable[[FloatArray], FloatArray]],
    bounds: Sequence[tuple[float, float]],
    resolution: int = 401,
) -> FloatArray:
    """Nearest point of {c(p) >= 0 for every c} to ``point`` in the plane.

    A dense grid picks the start, SLSQP polishes it. Constraints take (m, 2) arrays.
    """
    point = np.asarray(point, dtype=np.float64)
    axes = [np.linspace(lo, hi, resolution) for lo, hi in bounds]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
    feasible = np.ones(mesh.shape[0], dtype=bool)
    for constraint in constraints:
        feasible &= constraint(mesh) >= 0
    if not feasible.any():
        raise ConfigurationError("projection grid contains no feasible point")
    candidates = mesh[feasible]
    start = candidates[np.argmin(np.sum((candidates - point) ** 2, axis=1))]
    result = optimize.minimize(
        lambda p: float(np.sum((p - point) ** 2)),
        start,
        jac=lambda p: 2.0 * (p - point),
        constraints=[{"type": "ineq", "fun": lambda p, c=c: float(c(p[None, :])[0])} for c in constraints],
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": 500},
    )
    polished = np.asarray(result.x)
    violation = min(float(c(polished[None, :])[0]) for c in constraints)
    if violation >= -1e-10 and np.sum((polished - point) ** 2) <= np.sum((start - point) ** 2):
        return polished
    return start


def primal_bound(problem: DroProblem, beta: ArrayLike, support_grid: ArrayLike) -> float:
    """Best E[ℓ(βᵀZ)] over transport plans from the atoms onto ``support_grid`` within budget δ.

    A linear program in the plan weights p_ij; a lower bound on the worst-case objective.
    """
    beta = np.asarray(beta, dtype=np.float64)
    data = problem.data
    grid = np.asarray(support_grid, dtype=np.float64)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[1] != data.d:
        raise ConfigurationError(f"support grid points need dimension {data.d}, got {grid.shape[1]}")
    n, m = data.n, grid.shape[0]
    labels = data.label_values()
    losses = problem.loss.value(np.broadcast_to(grid @ beta, (n, m)), labels[:, None])
    costs = np.empty((n, m))
    for i in range(n):
        A = problem.cost.matrix_at(i, data.points[i])
        diff = grid - data.points[i]
        costs[i] = np.einsum("jk,kl,jl->j", diff, A, diff)
    if float(np.mean(costs.min(axis=1))) > problem.delta:
        raise ConfigurationError("support grid has no transport plan within the budget δ")

    equality = np.kron(np.eye(n), np.ones((1, m)))
    result = optimize.linprog(
        -losses.ravel(),
        A_ub=costs.ravel()[None, :],
        b_ub=[problem.delta],
        A_eq=equality,
        b_eq=np.full(n, 1.0 / n),
        bounds=(0, None),
        method="highs",
    )
    if result.status != 0:
        raise NumericalError(f"transport LP failed: {result.message}")
    return float(-result.fun)
