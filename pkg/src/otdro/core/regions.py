"""Derived constants, feasible regions and projections for θ = (β, λ).

* 𝕍 = {K₁‖β‖ ≤ λ ≤ K₂‖β‖} contains the optimizer.
* 𝕎 = {K₁‖β‖ ≤ λ ≤ K₂R_β} ∩ {‖β‖ ≤ R_β} is its convex relaxation, used by smooth SGD.
* 𝕌_η = {‖β‖ ≤ R_β, λ ≥ λ_thr(β) + η} is the shifted effective domain, used by nonsmooth SGD.

Every region constrains β only through ‖β‖ (or a quadratic form), so projections reduce
to problems in the (‖β_free‖, λ) plane or to a one-dimensional root find.
"""

from __future__ import annotations

import logging
import math
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import optimize

from otdro.core.dro_dataclasses import ConstantsBundle
from otdro.core.errors import ConfigurationError, DegenerateBoundsError, NumericalError
from otdro.core.models import CostKind, Decision, DroProblem, FloatArray

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-14
CURVE_GRID = 257
DYKSTRA_SWEEPS = 500


class LBounds(NamedTuple):
    lower: float
    upper: float
    estimated: bool


# ------------------------------------------------------------
# Thresholds
# ------------------------------------------------------------


def max_quadratic_form(problem: DroProblem, beta: FloatArray) -> float:
    """ess-sup of βᵀA(X)⁻¹β, exact as a max over the finite support."""
    beta = np.asarray(beta, dtype=np.float64)
    if not np.any(beta):
        return 0.0
    cost = problem.cost
    if cost.kind is CostKind.CALLBACK:
        points = problem.data.points
        return float(max(beta @ cost.solve(beta, i, points[i]) for i in range(problem.data.n)))
    return float(beta @ cost.worst_inverse() @ beta)


def lambda_thr(problem: DroProblem, beta: FloatArray) -> float:
    """κ√δ·max_i βᵀA(X_i)⁻¹β, below which ℓ_rob is infinite."""
    return problem.loss.kappa * problem.sqrt_delta * max_quadratic_form(problem, beta)


def lambda_thr_prime(problem: DroProblem, beta: FloatArray) -> float:
    """(M/2)√δ·max_i βᵀA(X_i)⁻¹β, above which F is concave in γ."""
    return 0.5 * problem.loss.curvature * problem.sqrt_delta * max_quadratic_form(problem, beta)


def lambda_bounds(problem: DroProblem, beta: FloatArray) -> tuple[float, float]:
    """(λ_min(β), λ_max(β)) bracketing the minimizer of f_δ(β, ·)."""
    beta = np.asarray(beta, dtype=np.float64)
    norm = float(np.linalg.norm(beta))
    data = problem.data
    root_mean_sq = math.sqrt(
        float(np.mean(problem.loss.dplus(data.points @ beta, data.label_values()) ** 2))
    )
    rho_min, rho_max = problem.cost.rho_min, problem.cost.rho_max
    lower = 0.5 * norm * root_mean_sq / math.sqrt(rho_max)
    upper = (
        norm * root_mean_sq / math.sqrt(rho_min)
        + 0.5 * problem.sqrt_delta * problem.loss.curvature * norm * norm / rho_min
    )
    return lower, upper


# ------------------------------------------------------------
# Constants
# ------------------------------------------------------------


def _mean_sq_derivative(problem: DroProblem, betas: FloatArray) -> FloatArray:
    data = problem.data
    u = data.points @ betas.T
    return np.mean(problem.loss.dplus(u, data.label_values()[:, None]) ** 2, axis=0)


def _mean_sq_derivative_grad(problem: DroProblem, beta: FloatArray) -> FloatArray:
    data = problem.data
    y = data.label_values()
    u = data.points @ beta
    weight = 2.0 * problem.loss.dplus(u, y) * problem.loss.d2(u, y)
    return np.mean(weight[:, None] * data.points, axis=0)


def _ball_project_free(beta: FloatArray, mask: np.ndarray, radius: float) -> FloatArray:
    free = beta[mask]
    norm = float(np.linalg.norm(free))
    if norm > radius:
        beta = beta.copy()
        beta[mask] = free * (radius / norm)
    return beta


def project_ball(problem: DroProblem, beta: FloatArray, radius: Optional[float] = None) -> FloatArray:
    """Radial projection of β onto {‖β‖ ≤ radius} with the pinned coordinates held."""
    radius = problem.r_beta if radius is None else radius
    free_radius = math.sqrt(max(radius**2 - problem.pinned_norm**2, 0.0))
    return _ball_project_free(problem.pin(beta), problem.free_mask, free_radius)


def estimate_L_bounds(
    problem: DroProblem,
    sphere_samples: int = 256,
    refine_steps: int = 100,
    seed: int = 0,
    override: Optional[Sequence[float]] = None,
) -> LBounds:
    """Extremes of β ↦ E_n[ℓ′(βᵀX; Y)²] over the decision ball.

    Evaluates the sphere of radius R_β, half that radius and β near 0, then polishes
    the best candidates by projected gradient steps.
    """
    if override is not None:
        lower, upper = (float(v) for v in override)
        if not 0 < lower <= upper:
            raise ConfigurationError(f"L bounds override needs 0 < lower <= upper, got {override!r}")
        return LBounds(lower, upper, estimated=False)
    if problem.loss.d2 is None:
        raise ConfigurationError(f"loss {problem.loss.name!r} is not smooth; L bounds need ℓ″")

    rng = np.random.default_rng(seed)
    mask = problem.free_mask
    free_radius = math.sqrt(problem.r_beta**2 - problem.pinned_norm**2)
    directions = rng.standard_normal((sphere_samples, int(mask.sum())))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    free = np.vstack(
        [np.zeros((1, mask.sum())), free_radius * directions, 0.5 * free_radius * directions]
    )
    base = problem.pin(np.zeros(problem.data.d))
    candidates = np.tile(base, (free.shape[0], 1))
    candidates[:, mask] = free
    values = _mean_sq_derivative(problem, candidates)

    lower = _polish_extreme(problem, candidates[int(np.argmin(values))], -1.0, refine_steps, mask, free_radius)
    upper = _polish_extreme(problem, candidates[int(np.argmax(values))], 1.0, refine_steps, mask, free_radius)
    lower = min(lower, float(values.min()))
    upper = max(upper, float(values.max()))
    if lower <= DEGENERATE_TOL:
        raise DegenerateBoundsError(
            f"E[ℓ′(βᵀX)²] is {lower!r} for some β in the ball; ℓ′ vanishes on the data"
        )
    logger.debug("estimated L bounds (%.6g, %.6g)", lower, upper)
    return LBounds(lower, upper, estimated=True)


def _polish_extreme(problem, beta, sign, steps, mask, radius) -> float:
    def h(b):
        return float(_mean_sq_derivative(problem, b[None, :])[0])

    value = h(beta)
    step = 1.0
    for _ in range(steps):
        grad = _mean_sq_derivative_grad(problem, beta)
        grad[~mask] = 0.0
        if not np.any(grad):
            break
        trial = _ball_project_free(beta + sign * step * grad, mask, radius)
        trial_value = h(trial)
        if sign * (trial_value - value) > 0:
            beta, value = trial, trial_value
            step *= 1.5
        else:
            step *= 0.5
            if step < 1e-12:
                break
    return value


def build_constants(problem: DroProblem, bounds: LBounds | Sequence[float]) -> ConstantsBundle:
    if not isinstance(bounds, LBounds):
        lower, upper = (float(v) for v in bounds)
        bounds = LBounds(lower, upper, estimated=False)
    if not 0 < bounds.lower <= bounds.upper:
        raise DegenerateBoundsError(f"need 0 < L_lower <= L_upper, got {tuple(bounds)[:2]!r}")
    M = problem.loss.M
    if M is None:
        raise ConfigurationError(
            f"loss {problem.loss.name!r} has no second-derivative bound M; 𝕎 is undefined"
        )
    rho_min, rho_max = problem.cost.rho_min, problem.cost.rho_max
    radius = problem.r_beta
    s = problem.sqrt_delta
    L_lo, L_hi = bounds.lower, bounds.upper

    delta0 = rho_min**2 * L_lo / (radius**2 * M**2 * rho_max)
    delta1 = delta2 = None
    if problem.nondegeneracy is not None:
        c1, c2, p = problem.nondegeneracy
        delta1 = min(
            delta0 / 4.0,
            c1**2 * c2**2 * p**2 * rho_min**2 / rho_max * L_lo / L_hi**2 / 256.0,
        )
        k1, k2 = problem.loss.k1, problem.loss.k2
        if k1 is not None and k2 is not None:
            delta2 = (
                c1**2 * c2**2 * p * rho_min**2
                / (2.0 * k1 * math.sqrt(rho_max) + 4.0 * c1 * math.sqrt(rho_min) * (1.0 + k2)) ** 2
            )

    bundle = ConstantsBundle(
        L_lower=L_lo,
        L_upper=L_hi,
        K1=0.5 * math.sqrt(L_lo / rho_max),
        K2=0.5 * s * M * radius / rho_min + math.sqrt(L_hi / rho_min),
        K2_table=s * M * radius / rho_min + L_hi / math.sqrt(rho_min),
        delta0=delta0,
        delta1=delta1,
        phi_min=math.sqrt(L_lo) / math.sqrt(rho_max) - s * radius * M / rho_min,
        kappa0=0.5 * L_lo / rho_max,
        estimated=bounds.estimated,
        delta=problem.delta,
        r_beta=radius,
        delta2=delta2,
    )
    if not bundle.smooth_regime:
        logger.warning(
            "delta=%.6g is not below delta0=%.6g; the smooth regime is not guaranteed",
            problem.delta, delta0,
        )
    return bundle


def in_V(theta: Decision, consts: ConstantsBundle, tol: float = 1e-12) -> bool:
    norm = theta.beta_norm
    return consts.K1 * norm - tol <= theta.lam <= consts.K2 * norm + tol


def in_W(theta: Decision, consts: ConstantsBundle, r_beta: float, tol: float = 1e-12) -> bool:
    norm = theta.beta_norm
    return (
        norm <= r_beta * (1.0 + tol)
        and consts.K1 * norm - tol <= theta.lam <= consts.K2 * r_beta + tol
    )


# ------------------------------------------------------------
# Planar projections in (t, λ) with t = ‖β_free‖
# ------------------------------------------------------------


def _project_cone_slab(t: float, lam: float, K1: float, cap: float) -> tuple[float, float]:
    """Closest point of {K₁t ≤ λ ≤ cap} to (t, λ), case by case."""
    if K1 * t <= lam <= cap:
        return t, lam
    if t <= cap / K1 and lam > cap:
        return t, cap
    if lam < -t / K1:
        return 0.0, 0.0
    if lam < min(K1 * t, cap * (1.0 + K1**-2) - t / K1):
        scale = (t + K1 * lam) / (1.0 + K1 * K1)
        return scale, K1 * scale
    return cap / K1, cap


def _segment_nearest(point: FloatArray, start: FloatArray, end: FloatArray) -> FloatArray:
    edge = end - start
    length_sq = float(edge @ edge)
    if length_sq == 0.0:
        return start
    weight = min(1.0, max(0.0, float((point - start) @ edge) / length_sq))
    return start + weight * edge


def _project_polygon(point: FloatArray, vertices: Sequence[FloatArray]) -> FloatArray:
    """Closest boundary point of a convex polygon (caller knows the point is outside)."""
    best, best_dist = None, math.inf
    for start, end in zip(vertices, [*vertices[1:], vertices[0]]):
        candidate = _segment_nearest(point, start, end)
        dist = float(np.sum((candidate - point) ** 2))
        if dist < best_dist:
            best, best_dist = candidate, dist
    return best


def _project_curved(t0, lam0, lower, cap, t_max) -> tuple[float, float]:
    """Closest point of {lower(t) ≤ λ ≤ cap, 0 ≤ t ≤ t_max} with ``lower`` convex increasing."""
    if lower(0.0) > cap:
        raise NumericalError("projection region is empty: pinned coordinates force λ above its cap")
    if t0 <= t_max and lower(t0) <= lam0 <= cap:
        return t0, lam0
    t_hi = t_max
    if math.isfinite(cap) and lower(t_max) > cap:
        t_hi = optimize.brentq(lambda t: lower(t) - cap, 0.0, t_max, xtol=1e-15)

    candidates = [(0.0, float(np.clip(lam0, lower(0.0), cap)))]
    candidates.append((t_hi, float(np.clip(lam0, lower(t_hi), cap))))
    if math.isfinite(cap):
        candidates.append((float(np.clip(t0, 0.0, t_hi)), cap))

    def dist(t):
        return (t - t0) ** 2 + (lower(t) - lam0) ** 2

    grid = np.linspace(0.0, t_hi, CURVE_GRID)
    values = np.array([dist(t) for t in grid])
    k = int(np.argmin(values))
    left, right = grid[max(k - 1, 0)], grid[min(k + 1, CURVE_GRID - 1)]
    if right > left:
        result = optimize.minimize_scalar(dist, bounds=(left, right), method="bounded", options={"xatol": 1e-14})
        t_curve = float(result.x)
    else:
        t_curve = float(grid[k])
    candidates.append((t_curve, lower(t_curve)))
    return min(candidates, key=lambda c: (c[0] - t0) ** 2 + (c[1] - lam0) ** 2)


def _lift(theta: Decision, mask: np.ndarray, t: float, lam: float) -> Decision:
    beta = np.array(theta.beta)
    free = beta[mask]
    norm = float(np.linalg.norm(free))
    beta[mask] = free * (t / norm) if norm > 0 else 0.0
    return Decision(beta, lam)


def project_W(
    theta: Decision,
    consts: ConstantsBundle,
    r_beta: float,
    pinned: tuple[tuple[int, float], ...] = (),
) -> Decision:
    """Euclidean projection onto 𝕎 ∩ {‖β‖ ≤ R_β}."""
    K1, cap = consts.K1, consts.K2 * r_beta
    if pinned:
        beta = np.array(theta.beta)
        mask = np.ones(beta.shape, dtype=bool)
        for index, value in pinned:
            mask[index] = False
            beta[index] = value
        s_sq = float(np.sum(beta[~mask] ** 2))
        t, lam = _project_curved(
            float(np.linalg.norm(beta[mask])),
            theta.lam,
            lambda t: K1 * math.sqrt(t * t + s_sq),
            cap,
            math.sqrt(max(r_beta**2 - s_sq, 0.0)),
        )
        return _lift(Decision(beta, theta.lam), mask, t, lam)

    mask = np.ones(theta.beta.shape, dtype=bool)
    t0 = theta.beta_norm
    t, lam = _project_cone_slab(t0, theta.lam, K1, cap)
    if t > r_beta:
        corner = min(r_beta, cap / K1)
        vertices = [
            np.array([0.0, 0.0]),
            np.array([corner, K1 * corner]),
            np.array([corner, cap]),
            np.array([0.0, cap]),
        ]
        t, lam = _project_polygon(np.array([t0, theta.lam]), vertices)
    if t == t0 and lam == theta.lam:
        return theta
    return _lift(theta, mask, float(t), float(lam))


def project_U_eta(theta: Decision, problem: DroProblem, eta: float) -> Decision:
    """Euclidean projection onto {‖β‖ ≤ R_β, λ ≥ λ_thr(β) + η}."""
    if eta < 0:
        raise ConfigurationError(f"eta must be nonnegative, got {eta!r}")
    beta = problem.pin(theta.beta)
    mask = problem.free_mask
    s_sq = problem.pinned_norm**2
    free_radius = math.sqrt(problem.r_beta**2 - s_sq)
    slope = problem.loss.kappa * problem.sqrt_delta

    if slope == 0.0:
        beta = _ball_project_free(beta, mask, free_radius)
        return Decision(beta, max(theta.lam, eta))

    P = problem.cost.worst_inverse()
    if problem.pinned:
        if P is None or not np.allclose(P, P[0, 0] * np.eye(P.shape[0])):
            raise ConfigurationError("pinned coordinates need an isotropic cost for 𝕌_η with κ > 0")
        weight = slope * float(P[0, 0])
        t, lam = _project_curved(
            float(np.linalg.norm(beta[mask])),
            theta.lam,
            lambda t: weight * (t * t + s_sq) + eta,
            math.inf,
            free_radius,
        )
        return _lift(Decision(beta, theta.lam), mask, t, lam)

    if P is None:
        return _project_U_eta_dykstra(theta, problem, eta, slope)
    beta, lam = _project_quadratic_epigraph(beta, theta.lam, slope * P, eta, problem.r_beta)
    return Decision(beta, lam)


def _project_quadratic_epigraph(beta0, lam0, Q, eta, radius) -> tuple[FloatArray, float]:
    """Closest point of {‖β‖ ≤ R, λ ≥ βᵀQβ + η}.

    β = ((1+ω)I + 2νQ)⁻¹β₀ and λ = λ₀ + ν, with ν found by a root find for each ball
    multiplier ω and ω found by a second root find when the ball binds.
    """
    eigenvalues, basis = np.linalg.eigh(Q)
    coords = basis.T @ beta0

    def beta_of(omega, nu):
        return basis @ (coords / ((1.0 + omega) + 2.0 * nu * eigenvalues))

    def q(b):
        return float(b @ Q @ b) + eta

    def nu_of(omega):
        if q(beta_of(omega, 0.0)) <= lam0:
            return 0.0
        excess = lambda nu: lam0 + nu - q(beta_of(omega, nu))
        hi = 1.0
        while excess(hi) < 0:
            hi *= 2.0
        return optimize.brentq(excess, 0.0, hi, xtol=1e-16, rtol=4 * np.finfo(float).eps)

    nu = nu_of(0.0)
    beta = beta_of(0.0, nu)
    if float(np.linalg.norm(beta)) > radius:
        overshoot = lambda omega: float(np.linalg.norm(beta_of(omega, nu_of(omega)))) - radius
        hi = 1.0
        while overshoot(hi) > 0:
            hi *= 2.0
        omega = optimize.brentq(overshoot, 0.0, hi, xtol=1e-16, rtol=4 * np.finfo(float).eps)
        nu = nu_of(omega)
        beta = beta_of(omega, nu)
    return beta, lam0 + nu


def _project_U_eta_dykstra(theta, problem, eta, slope) -> Decision:
    """Dykstra's alternating projections over the per-sample epigraphs and the ball."""
    logger.warning("project_U_eta with a callback cost is approximate (alternating projections)")
    points = problem.data.points
    quadratics = [
        slope * np.linalg.inv(problem.cost.matrix_at(i, points[i])) for i in range(problem.data.n)
    ]
    x = theta.as_vector()
    corrections = [np.zeros_like(x) for _ in range(len(quadratics) + 1)]
    for _ in range(DYKSTRA_SWEEPS):
        previous = x.copy()
        for k, Q in enumerate(quadratics):
            y = x + corrections[k]
            beta, lam = _project_quadratic_epigraph(y[:-1], y[-1], Q, eta, math.inf)
            x_new = np.append(beta, lam)
            corrections[k] = y - x_new
            x = x_new
        y = x + corrections[-1]
        ball = np.append(_ball_project_free(y[:-1], np.ones(y.size - 1, dtype=bool), problem.r_beta), y[-1])
        corrections[-1] = y - ball
        x = ball
        if np.max(np.abs(x - previous)) <= 1e-13:
            break
    return Decision(x[:-1], x[-1])
