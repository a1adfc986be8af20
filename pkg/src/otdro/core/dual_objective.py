"""Dual objective of the optimal-transport DRO problem.

For a decision θ = (β, λ) and a sample x with a = βᵀA(x)⁻¹β,

    F(γ, β, λ; x) = ℓ(βᵀx + γ√δ·a) − λ√δ(γ²a − 1),
    ℓ_rob(β, λ; x) = sup_γ F(γ, β, λ; x),
    f_δ(β, λ) = E_n[ℓ_rob(β, λ; X)].

The maximizer g satisfies 2λg = ℓ′(βᵀx̃) with x̃ = x + √δ·g·A(x)⁻¹β.
When λ exceeds λ′_thr the map γ ↦ ℓ′(βᵀx + γ√δa) − 2λγ is decreasing, so
g is found by bisection on its sign. Below that threshold a grid search with
Newton polishing takes over and the answer is flagged non-certified.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Literal, Optional

import numpy as np
from numpy.typing import ArrayLike
from scipy import optimize

from otdro.core.dro_dataclasses import ConstantsBundle, InnerSolution, SubgradientSample
from otdro.core.errors import (
    ConfigurationError,
    InfeasibleDomainError,
    KinkError,
    NonconcaveRegimeError,
    NumericalError,
    UnboundedIntervalError,
)
from otdro.core.models import CostKind, Decision, DroProblem, FloatArray, LossComponent
from otdro.core.regions import lambda_thr

logger = logging.getLogger(__name__)

ORACLE_CUTS = 60
MAX_EXPANSIONS = 64
FALLBACK_RESOLUTION = 0.25
FALLBACK_CHUNK = 1 << 18
MAX_FALLBACK_POINTS = 1 << 25
MAX_POLISH_STARTS = 256
DOMAIN_RTOL = 1e-12
KINK_TOL = 1e-12

InnerMethod = Literal["auto", "bisection", "closed_form"]


class DomainClass(str, Enum):
    INTERIOR = "interior"
    BOUNDARY = "boundary"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class InnerBatch:
    """Inner solutions for a batch of samples at one decision."""

    indices: FloatArray
    g: FloatArray
    lrob: FloatArray
    x_tilde: FloatArray
    u_tilde: FloatArray
    a: FloatArray
    residual: FloatArray
    certified: FloatArray
    cuts: int

    def solution(self, row: int) -> InnerSolution:
        return InnerSolution(
            g=float(self.g[row]),
            lrob=float(self.lrob[row]),
            x_tilde=self.x_tilde[row].copy(),
            residual=float(self.residual[row]),
            cuts_used=self.cuts,
            a=float(self.a[row]),
            certified=bool(self.certified[row]),
        )

    @property
    def fallback_count(self) -> int:
        return int(np.count_nonzero(~self.certified))


# ------------------------------------------------------------
# Row helpers
# ------------------------------------------------------------


def _indices(problem: DroProblem, indices: Optional[ArrayLike]) -> np.ndarray:
    if indices is None:
        return np.arange(problem.data.n)
    indices = np.atleast_1d(np.asarray(indices, dtype=np.intp))
    if indices.size and (indices.min() < 0 or indices.max() >= problem.data.n):
        raise ConfigurationError(f"sample index out of range for n={problem.data.n}")
    return indices


def directions(problem: DroProblem, beta: FloatArray, indices: np.ndarray) -> FloatArray:
    """A(X_i)⁻¹β for the requested samples."""
    cost = problem.cost
    points = problem.data.points
    if cost.kind is CostKind.CALLBACK:
        return np.stack([cost.solve(beta, int(i), points[i]) for i in indices])
    return cost.solve_all(beta, points)[indices]


def row_values(problem: DroProblem, beta: FloatArray, indices: np.ndarray):
    points = problem.data.points[indices]
    labels = problem.data.label_values()[indices]
    dirs = directions(problem, beta, indices)
    a = np.einsum("ij,j->i", dirs, beta)
    u0 = points @ beta
    return points, labels, dirs, a, u0


def _component_F(component: LossComponent, gamma, u0, a, lam, y, s):
    return component.value(u0 + gamma * s * a, y) - lam * s * (gamma * gamma * a - 1.0)


def F_values(problem: DroProblem, gamma, u0, a, lam, y):
    s = problem.sqrt_delta
    return problem.loss.value(u0 + gamma * s * a, y) - lam * s * (gamma * gamma * a - 1.0)


def bisect_component(
    component: LossComponent,
    u0: FloatArray,
    a: FloatArray,
    lam: FloatArray,
    y: FloatArray,
    s: float,
    cuts: int,
    half_width: FloatArray,
) -> tuple[FloatArray, FloatArray]:
    """Lock-step bisection on the sign of ℓ_i′(u0 + γsa) − 2λγ, one row per problem.

    Returns the midpoints and the final bracket half-widths.
    """
    slope = s * a

    def phi(gamma):
        return component.deriv(u0 + gamma * slope, y) - 2.0 * lam * gamma

    width = np.array(half_width, dtype=np.float64)
    for _ in range(MAX_EXPANSIONS):
        unbracketed = (phi(-width) < 0) | (phi(width) > 0)
        if not unbracketed.any():
            break
        width = np.where(unbracketed, np.maximum(2.0 * width, 1e-12), width)
    else:
        raise NumericalError("could not bracket the maximizer of F; λ may be below λ′_thr")

    lo, hi = -width, width.copy()
    for _ in range(cuts):
        mid = 0.5 * (lo + hi)
        up = phi(mid) > 0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    return 0.5 * (lo + hi), 0.5 * (hi - lo)


def _concave_rows(problem: DroProblem, component: LossComponent, a, lam) -> FloatArray:
    return lam > 0.5 * component.M * problem.sqrt_delta * a * (1.0 + DOMAIN_RTOL)


def _bisect_rows(problem, u0, a, lam, y, cuts, beta_norm, consts):
    """Maximize F over every component, keep the best; rows must be in the concave regime."""
    s = problem.sqrt_delta
    best_g = np.zeros_like(u0)
    best_value = np.full_like(u0, -np.inf)
    best_residual = np.zeros_like(u0)
    for component in problem.loss.components:
        lprime0 = component.deriv(u0, y)
        curvature = 2.0 * lam - component.M * s * a
        with np.errstate(divide="ignore", invalid="ignore"):
            width = np.abs(lprime0) / curvature
            if consts is not None and consts.phi_min > 0 and beta_norm > 0:
                width = np.abs(lprime0) / (consts.phi_min * beta_norm)
        width = np.where(np.isfinite(width), width, 1.0)
        g, half = bisect_component(component, u0, a, lam, y, s, cuts, width)
        value = _component_F(component, g, u0, a, lam, y, s)
        residual = np.abs(2.0 * lam * g - component.deriv(u0 + g * s * a, y))
        floor = np.abs(lprime0) / (2.0 * lam) - 2.0 * half - 1e-12 * (1.0 + np.abs(g))
        if np.any(np.abs(g) < floor):
            raise NumericalError("inner maximizer violates |g| >= |ℓ′(βᵀx)|/(2λ)")
        take = value > best_value
        best_g = np.where(take, g, best_g)
        best_value = np.where(take, value, best_value)
        best_residual = np.where(take, residual, best_residual)
    return best_g, best_value, best_residual


# ------------------------------------------------------------
# Public operations
# ------------------------------------------------------------


def eval_F(problem: DroProblem, gamma: float, theta: Decision, x_index: int) -> float:
    """F(γ, β, λ; X_i)."""
    indices = _indices(problem, [x_index])
    _, labels, _, a, u0 = row_values(problem, theta.beta, indices)
    return float(F_values(problem, float(gamma), u0, a, theta.lam, labels)[0])


def classify_domain(problem: DroProblem, theta: Decision) -> DomainClass:
    threshold = lambda_thr(problem, theta.beta)
    tol = DOMAIN_RTOL * max(1.0, threshold)
    if theta.lam > threshold + tol:
        return DomainClass.INTERIOR
    if theta.lam < threshold - tol:
        return DomainClass.INFEASIBLE
    return DomainClass.BOUNDARY


def solve_inner(
    problem: DroProblem,
    theta: Decision,
    indices: Optional[ArrayLike] = None,
    cuts: int = ORACLE_CUTS,
    consts: Optional[ConstantsBundle] = None,
    method: InnerMethod = "auto",
) -> InnerBatch:
    """Inner maximization for many samples at one decision.

    ``auto`` bisects concave rows and sends the rest to the grid fallback;
    ``bisection`` refuses nonconcave rows; ``closed_form`` needs a quadratic loss.
    """
    idx = _indices(problem, indices)
    points, labels, dirs, a, u0 = row_values(problem, theta.beta, idx)
    lam = np.full(idx.shape, theta.lam)
    s = problem.sqrt_delta
    certified = np.ones(idx.shape, dtype=bool)

    if not np.any(theta.beta):
        g = np.zeros(idx.shape)
        value = problem.loss.value(u0, labels) + theta.lam * s
        residual = np.zeros(idx.shape)
    else:
        finite = lam > problem.loss.kappa * s * a * (1.0 + DOMAIN_RTOL)
        if not finite.all():
            raise InfeasibleDomainError(
                f"λ={theta.lam!r} is not above κ√δ·a for {int((~finite).sum())} sample(s)"
            )
        if method == "closed_form":
            g, value, residual = _closed_form_rows(problem, u0, a, theta.lam, labels)
        else:
            concave = np.ones(idx.shape, dtype=bool)
            for component in problem.loss.components:
                concave &= _concave_rows(problem, component, a, lam)
            if not concave.all() and method == "bisection":
                raise NonconcaveRegimeError(
                    f"λ={theta.lam!r} is at or below λ′_thr for {int((~concave).sum())} sample(s)",
                    theta,
                )
            g = np.zeros(idx.shape)
            value = np.zeros(idx.shape)
            residual = np.zeros(idx.shape)
            if concave.any():
                g[concave], value[concave], residual[concave] = _bisect_rows(
                    problem, u0[concave], a[concave], lam[concave], labels[concave],
                    cuts, theta.beta_norm, consts,
                )
            for row in np.flatnonzero(~concave):
                solution = fallback_maximize(problem, theta, int(idx[row]))
                g[row], value[row], residual[row] = solution.g, solution.lrob, solution.residual
                certified[row] = False
            if not certified.all():
                logger.warning(
                    "%d inner solve(s) used the non-certified fallback at λ=%.6g",
                    int((~certified).sum()), theta.lam,
                )

    x_tilde = points + (s * g)[:, None] * dirs
    return InnerBatch(
        indices=idx,
        g=g,
        lrob=value,
        x_tilde=x_tilde,
        u_tilde=u0 + g * s * a,
        a=a,
        residual=residual,
        certified=certified,
        cuts=int(cuts),
    )


def inner_maximize(
    problem: DroProblem,
    theta: Decision,
    x_index: int,
    cuts: int = ORACLE_CUTS,
    consts: Optional[ConstantsBundle] = None,
) -> InnerSolution:
    """Bisection solve of sup_γ F for one sample; raises in the nonconcave regime."""
    return solve_inner(problem, theta, [x_index], cuts, consts, method="bisection").solution(0)


def fallback_maximize(
    problem: DroProblem,
    theta: Decision,
    x_index: int,
    grid_points: int = 4001,
    growth_constant: float = 1.0,
) -> InnerSolution:
    """Grid search over a compact γ-interval followed by Newton polishing of the near-best cells.

    The half-width follows the compact-interval bound |√δ·g·a| ≤ 1 + C₁ε⁻¹(1 + |βᵀx|)
    with ε = λ/(√δa) − κ, doubled while the grid maximum sits on an endpoint. The grid
    has at least ``grid_points`` points and a spacing in u = βᵀx̃ of at most
    FALLBACK_RESOLUTION/√sup|ℓ″|, so neighbouring local maxima of ℓ stay in separate cells.
    Every grid local maximum within the cell error bound of the best one is polished.
    """
    idx = _indices(problem, [x_index])
    points, labels, dirs, a_arr, u0_arr = row_values(problem, theta.beta, idx)
    a, u0, y = float(a_arr[0]), float(u0_arr[0]), labels[:1]
    s = problem.sqrt_delta
    lam = theta.lam

    def F(gamma):
        return F_values(problem, np.asarray(gamma, dtype=np.float64), u0, a, lam, y)

    if a == 0.0:
        value = float(F(np.zeros(1))[0])
        return InnerSolution(0.0, value, points[0].copy(), 0.0, 0, 0.0, certified=False)

    epsilon = lam / (s * a) - problem.loss.kappa
    if epsilon <= 0:
        raise UnboundedIntervalError(
            f"λ={lam!r} does not exceed κ√δ·a={problem.loss.kappa * s * a!r}; F is unbounded in γ"
        )
    half_width = (1.0 + growth_constant * (1.0 + abs(u0)) / epsilon) / (s * a)
    curvature = max(problem.loss.curvature, 1.0)
    spacing = FALLBACK_RESOLUTION / math.sqrt(curvature) / (s * a)

    for _ in range(MAX_EXPANSIONS):
        count = max(int(grid_points), math.ceil(2.0 * half_width / spacing)) + 2
        if count > MAX_FALLBACK_POINTS:
            logger.warning(
                "fallback grid capped at %d points; γ spacing %.3g is coarser than %.3g",
                MAX_FALLBACK_POINTS, 2.0 * half_width / (MAX_FALLBACK_POINTS - 1), spacing,
            )
            count = MAX_FALLBACK_POINTS
        step = 2.0 * half_width / (count - 1)
        # F″ is bounded by (sup ℓ″·√δa + 2λ)√δa, so a cell hides at most |F″|·step²/8
        tolerance = 2.0 * (curvature * s * a + 2.0 * lam) * s * a * step * step / 8.0
        top, top_value, candidates = _scan_grid(F, -half_width, step, count, tolerance)
        if 0 < top < count - 1:
            break
        half_width *= 2.0
    else:
        raise UnboundedIntervalError("fallback grid maximum keeps escaping to the interval edge")

    best_g, best_value = -half_width + top * step, top_value
    for start in candidates:
        g, v = _polish(
            problem, F, -half_width + (start - 1) * step, -half_width + start * step,
            -half_width + (start + 1) * step, u0, a, lam, y,
        )
        if v > best_value:
            best_g, best_value = g, v

    u_tilde = u0 + best_g * s * a
    residual = float(abs(2.0 * lam * best_g - problem.loss.dplus(np.array([u_tilde]), y)[0]))
    x_tilde = points[0] + s * best_g * dirs[0]
    return InnerSolution(best_g, best_value, x_tilde, residual, 0, a, certified=False)


def _scan_grid(F, start, step, count, tolerance) -> tuple[int, float, list[int]]:
    """Chunked scan of F on start + k·step, k < count.

    Returns the argmax, its value and the interior local maxima within ``tolerance``
    of it (at most MAX_POLISH_STARTS, best first).
    """
    top, top_value = 0, -math.inf
    found: list[tuple[float, int]] = []
    for lo in range(0, count, FALLBACK_CHUNK):
        hi = min(lo + FALLBACK_CHUNK, count)
        # one point of overlap on each side for the neighbour comparison
        k = np.arange(max(lo - 1, 0), min(hi + 1, count))
        values = F(start + k * step)
        best = int(np.argmax(values))
        if values[best] > top_value and lo <= k[best] < hi:
            top, top_value = int(k[best]), float(values[best])
        inner = np.flatnonzero((k >= max(lo, 1)) & (k < min(hi, count - 1)))
        peak = inner[(values[inner] >= values[inner - 1]) & (values[inner] >= values[inner + 1])]
        found.extend(zip(values[peak].tolist(), k[peak].tolist()))
        if len(found) > 4 * MAX_POLISH_STARTS:
            found = sorted(found, reverse=True)[:MAX_POLISH_STARTS]
    near = sorted((item for item in found if item[0] >= top_value - tolerance), reverse=True)
    return top, top_value, [index for _, index in near[:MAX_POLISH_STARTS]]


def _polish(problem, F, left, start, right, u0, a, lam, y) -> tuple[float, float]:
    s = problem.sqrt_delta
    loss = problem.loss
    start_value = float(F(np.array([start]))[0])
    if loss.d2 is not None:
        gamma = start
        for _ in range(50):
            u = np.array([u0 + gamma * s * a])
            phi = float(loss.dplus(u, y)[0]) - 2.0 * lam * gamma
            slope = float(loss.d2(u, y)[0]) * s * a - 2.0 * lam
            if slope >= 0:
                break
            step = phi / slope
            gamma -= step
            if not left <= gamma <= right:
                break
            if abs(step) <= 1e-15 * (1.0 + abs(gamma)):
                value = float(F(np.array([gamma]))[0])
                if value >= start_value:
                    return gamma, value
                break
    result = optimize.minimize_scalar(
        lambda t: -float(F(np.array([t]))[0]),
        bounds=(left, right),
        method="bounded",
        options={"xatol": 1e-13},
    )
    value = -float(result.fun)
    if value >= start_value:
        return float(result.x), value
    return start, start_value


def grad_lrob(
    problem: DroProblem, theta: Decision, x_index: int, inner: InnerSolution
) -> SubgradientSample:
    """∇ℓ_rob = (ℓ′(βᵀx̃)·x̃, −√δ(g²a − 1))."""
    u_tilde = float(theta.beta @ inner.x_tilde)
    y = problem.data.label_values()[x_index]
    upper = float(problem.loss.dplus(u_tilde, y))
    lower = float(problem.loss.dminus(u_tilde, y))
    if abs(upper - lower) > KINK_TOL * (1.0 + abs(upper)):
        raise KinkError(
            f"loss {problem.loss.name!r} has a kink at βᵀx̃={u_tilde!r}; use subgrad_lrob"
        )
    d_lambda = -problem.sqrt_delta * (inner.g * inner.g * inner.a - 1.0)
    return SubgradientSample(upper * inner.x_tilde, d_lambda, upper)


def subgrad_lrob(
    problem: DroProblem,
    theta: Decision,
    x_index: int,
    inner: InnerSolution,
    rng: np.random.Generator,
) -> SubgradientSample:
    """An element of D(β,λ;x): L′ drawn uniformly from [∂₋ℓ, ∂₊ℓ] at βᵀx̃."""
    u_tilde = float(theta.beta @ inner.x_tilde)
    y = problem.data.label_values()[x_index]
    upper = float(problem.loss.dplus(u_tilde, y))
    lower = float(problem.loss.dminus(u_tilde, y))
    choice = upper if upper <= lower else float(rng.uniform(lower, upper))
    d_lambda = problem.sqrt_delta * (1.0 - inner.g * inner.g * inner.a)
    return SubgradientSample(choice * inner.x_tilde, d_lambda, choice)


def batch_gradient(
    problem: DroProblem,
    theta: Decision,
    batch: InnerBatch,
    rng: Optional[np.random.Generator] = None,
) -> FloatArray:
    """Mean (sub)gradient over a batch; with ``rng`` kinks draw L′ uniformly."""
    labels = problem.data.label_values()[batch.indices]
    upper = problem.loss.dplus(batch.u_tilde, labels)
    lower = problem.loss.dminus(batch.u_tilde, labels)
    kinked = np.abs(upper - lower) > KINK_TOL * (1.0 + np.abs(upper))
    if kinked.any():
        if rng is None:
            raise KinkError(f"{int(kinked.sum())} transported point(s) sit on a kink of the loss")
        draws = rng.uniform(np.where(kinked, lower, 0.0), np.where(kinked, upper, 0.0))
        lprime = np.where(kinked, draws, upper)
    else:
        lprime = upper
    d_beta = np.mean(lprime[:, None] * batch.x_tilde, axis=0)
    d_lambda = float(np.mean(-problem.sqrt_delta * (batch.g**2 * batch.a - 1.0)))
    return np.append(d_beta, d_lambda)


def full_gradient(
    problem: DroProblem,
    theta: Decision,
    cuts: int = ORACLE_CUTS,
    consts: Optional[ConstantsBundle] = None,
) -> FloatArray:
    """∇f_δ(β, λ) as one vector (∂β..., ∂λ)."""
    return batch_gradient(problem, theta, solve_inner(problem, theta, None, cuts, consts))


def f_delta(
    problem: DroProblem,
    theta: Decision,
    cuts: int = ORACLE_CUTS,
    consts: Optional[ConstantsBundle] = None,
    method: InnerMethod = "auto",
) -> float:
    """E_n[ℓ_rob(β, λ; X)], +∞ outside the interior of the effective domain."""
    if np.any(theta.beta) and classify_domain(problem, theta) is not DomainClass.INTERIOR:
        return math.inf
    if theta.lam < 0:
        return math.inf
    return float(np.mean(solve_inner(problem, theta, None, cuts, consts, method).lrob))


def _closed_form_rows(problem: DroProblem, u0, a, lam, labels):
    loss = problem.loss
    if not loss.quadratic:
        raise ConfigurationError(f"loss {loss.name!r} has no quadratic closed form")
    s = problem.sqrt_delta
    gap = lam - s * a
    if np.any(gap <= 0):
        raise InfeasibleDomainError(f"λ={lam!r} must exceed √δ·a={float(np.max(s * a))!r}")
    r = u0 - loss.quadratic_center(labels)
    g = r / gap
    value = lam * s + lam * r * r / gap + loss.quadratic_offset(labels)
    residual = np.abs(2.0 * lam * g - loss.dplus(u0 + g * s * a, labels))
    return g, value, residual


@functools.cache
def _note_closed_form_convention() -> None:
    logger.info(
        "squared-loss closed form uses λ√δ + λr²/(λ − √δa), derived from the univariate dual; "
        "the variant with denominator λ + √δa and no λ√δ term is not used"
    )


def squared_loss_lrob_closed_form(problem: DroProblem, theta: Decision, x_index: int) -> float:
    """λ√δ + λ(βᵀx − y)²/(λ − √δa) for quadratic losses."""
    _note_closed_form_convention()
    idx = _indices(problem, [x_index])
    _, labels, _, a, u0 = row_values(problem, theta.beta, idx)
    _, value, _ = _closed_form_rows(problem, u0, a, theta.lam, labels)
    return float(value[0])


def lrob_hinge_closed_form(problem: DroProblem, theta: Decision, x_index: int) -> float:
    """λ√δ + max(0, 1 − yβᵀx + y²√δa/(4λ)) for the hinge loss."""
    idx = _indices(problem, [x_index])
    _, labels, _, a, u0 = row_values(problem, theta.beta, idx)
    s = problem.sqrt_delta
    y = labels[0]
    return float(theta.lam * s + max(0.0, 1.0 - y * u0[0] + y * y * s * a[0] / (4.0 * theta.lam)))
