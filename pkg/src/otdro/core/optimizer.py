"""Projected stochastic-gradient schemes for min over (β, λ) of f_δ.

All runs share one loop: sample a batch, solve the inner problems, take a (sub)gradient
step, project, and update the polynomial-decay average
θ̄_k = (1 − w_k)θ̄_{k−1} + w_k·θ_k with w_k = (ξ+1)/(k+ξ).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from otdro.core.dro_dataclasses import (
    ConstantsBundle,
    LambdaStar,
    LineSearchResult,
    RateFit,
    RunTrace,
    StepSchedule,
    TraceRecord,
)
from otdro.core.dual_objective import (
    ORACLE_CUTS,
    InnerMethod,
    batch_gradient,
    f_delta,
    solve_inner,
)
from otdro.core.errors import ConfigurationError, NumericalError
from otdro.core.models import Decision, DroProblem, FloatArray
from otdro.core.regions import (
    in_W,
    lambda_bounds,
    lambda_thr,
    project_ball,
    project_U_eta,
    project_W,
)

logger = logging.getLogger(__name__)

CHECKPOINTS = 200
INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
INV_PHI_SQ = (3.0 - math.sqrt(5.0)) / 2.0


# ------------------------------------------------------------
# Shared SGD loop
# ------------------------------------------------------------


@dataclass(frozen=True)
class _LoopSpec:
    method: str
    problem: DroProblem
    theta0: Decision
    iterations: int
    seed: int
    xi: float
    batch_size: int
    cut_schedule: StepSchedule
    step: Callable[[int, Decision, FloatArray], Decision]
    project: Callable[[Decision], Decision]
    gradient: Callable[[Decision, np.ndarray, int, np.random.Generator], tuple[FloatArray, int]]
    objective: Callable[[Decision], float]
    feasible: Callable[[Decision], bool]
    record_timing: bool = False


def sample_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(sampling stream, subgradient-draw stream) for one run."""
    sample_seq, draw_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(sample_seq), np.random.default_rng(draw_seq)


def checkpoint_every(iterations: int) -> int:
    return max(1, math.ceil(iterations / CHECKPOINTS))


def _draw_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    if batch_size >= n:
        return np.arange(n)
    return rng.integers(0, n, size=batch_size)


def _run(spec: _LoopSpec) -> RunTrace:
    if spec.iterations < 1:
        raise ConfigurationError(f"iterations must be positive, got {spec.iterations!r}")
    if spec.batch_size < 1:
        raise ConfigurationError(f"batch_size must be positive, got {spec.batch_size!r}")
    if spec.xi < 0:
        raise ConfigurationError(f"xi must be nonnegative, got {spec.xi!r}")

    problem = spec.problem
    points = problem.data.points
    sample_rng, draw_rng = sample_streams(spec.seed)
    every = checkpoint_every(spec.iterations)
    started = time.perf_counter() if spec.record_timing else 0.0

    theta = spec.project(spec.theta0)
    theta_bar = theta
    trace = RunTrace(spec.method, spec.seed, spec.iterations, theta, theta_bar)
    for k in range(1, spec.iterations + 1):
        indices = _draw_batch(sample_rng, problem.data.n, spec.batch_size)
        cuts = spec.cut_schedule.cuts(k, float(np.max(np.linalg.norm(points[indices], axis=1))))
        grad, fallbacks = spec.gradient(theta, indices, cuts, draw_rng)
        grad[:-1][~problem.free_mask] = 0.0
        theta = spec.project(spec.step(k, theta, grad))
        if not spec.feasible(theta):
            raise NumericalError(f"iterate {k} left its projection region: {theta.to_json()!r}")
        weight = (spec.xi + 1.0) / (k + spec.xi)
        theta_bar = Decision.from_vector((1.0 - weight) * theta_bar.as_vector() + weight * theta.as_vector())
        trace.total_cuts += cuts
        trace.fallback_solves += fallbacks

        if k % every == 0 or k == spec.iterations:
            elapsed = (time.perf_counter() - started) * 1e3 if spec.record_timing else None
            trace.checkpoint(TraceRecord(k, theta, theta_bar, spec.objective(theta_bar), cuts, elapsed))

    trace.theta = theta
    trace.theta_bar = theta_bar
    if spec.record_timing:
        trace.elapsed_ms = (time.perf_counter() - started) * 1e3
    logger.info(
        "%s finished %d iterations: f=%.8g, %d cuts, %d fallback solves",
        spec.method, spec.iterations, trace.records[-1].f_delta, trace.total_cuts, trace.fallback_solves,
    )
    return trace


def _dro_gradient(problem, consts, inner_method, subgradient: bool):
    def gradient(theta, indices, cuts, rng):
        batch = solve_inner(problem, theta, indices, cuts, consts, inner_method)
        return batch_gradient(problem, theta, batch, rng if subgradient else None), batch.fallback_count

    return gradient


def default_start(problem: DroProblem, consts: Optional[ConstantsBundle] = None, lam: float = 1.0) -> Decision:
    """β = 0 (pinned coordinates at their values), λ at mid-height of 𝕎 when constants are known."""
    if consts is not None:
        lam = 0.5 * consts.lambda_cap
    return Decision(problem.pin(np.zeros(problem.data.d)), lam)


def _check_smooth_regime(problem: DroProblem, consts: ConstantsBundle, method: str) -> None:
    if problem.loss.d2 is None:
        raise ConfigurationError(f"{method} needs a smooth loss, got {problem.loss.name!r}")
    if not consts.smooth_regime:
        logger.warning(
            "%s: delta=%.6g is not below delta0=%.6g; iterates in 𝕎 may leave the smooth region",
            method, problem.delta, consts.delta0,
        )


# ------------------------------------------------------------
# SGD variants
# ------------------------------------------------------------


def sgd_smooth(
    problem: DroProblem,
    consts: ConstantsBundle,
    schedule: StepSchedule,
    xi: float = 0.0,
    iterations: int = 10_000,
    seed: int = 0,
    batch_size: int = 1,
    theta0: Optional[Decision] = None,
    inner_method: InnerMethod = "auto",
    record_timing: bool = False,
) -> RunTrace:
    """Projected SGD onto 𝕎 with biased bisection inner solves."""
    _check_smooth_regime(problem, consts, "sgd_smooth")

    def project(theta):
        return project_W(theta, consts, problem.r_beta, problem.pinned)

    def step(k, theta, grad):
        return Decision.from_vector(theta.as_vector() - schedule.rate(k) * grad)

    return _run(
        _LoopSpec(
            method="smooth",
            problem=problem,
            theta0=theta0 or default_start(problem, consts),
            iterations=iterations,
            seed=seed,
            xi=xi,
            batch_size=batch_size,
            cut_schedule=schedule,
            step=step,
            project=project,
            gradient=_dro_gradient(problem, consts, inner_method, subgradient=False),
            objective=lambda theta: f_delta(problem, theta, ORACLE_CUTS, consts),
            feasible=lambda theta: in_W(theta, consts, problem.r_beta, tol=1e-9),
            record_timing=record_timing,
        )
    )


def sgd_nonsmooth(
    problem: DroProblem,
    schedule: StepSchedule,
    eta: float,
    xi: float = 1.0,
    iterations: int = 10_000,
    seed: int = 0,
    batch_size: int = 1,
    theta0: Optional[Decision] = None,
    record_timing: bool = False,
) -> RunTrace:
    """Projected stochastic subgradient descent onto 𝕌_η."""
    if schedule.tau != 0.5:
        raise ConfigurationError(f"sgd_nonsmooth runs with tau = 1/2, got {schedule.tau!r}")
    if xi < 1:
        raise ConfigurationError(f"sgd_nonsmooth needs xi >= 1, got {xi!r}")
    if not eta > 0:
        raise ConfigurationError(f"eta must be positive, got {eta!r}")

    def project(theta):
        return project_U_eta(theta, problem, eta)

    def step(k, theta, grad):
        return Decision.from_vector(theta.as_vector() - schedule.rate(k) * grad)

    def feasible(theta):
        slack = 1e-9 * max(1.0, theta.lam)
        return (
            theta.beta_norm <= problem.r_beta * (1.0 + 1e-12)
            and theta.lam >= lambda_thr(problem, theta.beta) + eta - slack
        )

    return _run(
        _LoopSpec(
            method="nonsmooth",
            problem=problem,
            theta0=theta0 or default_start(problem, lam=eta + 1.0),
            iterations=iterations,
            seed=seed,
            xi=xi,
            batch_size=batch_size,
            cut_schedule=schedule,
            step=step,
            project=project,
            gradient=_dro_gradient(problem, None, "auto", subgradient=True),
            objective=lambda theta: f_delta(problem, theta),
            feasible=feasible,
            record_timing=record_timing,
        )
    )


def sgd_two_timescale(
    problem: DroProblem,
    consts: ConstantsBundle,
    beta_schedule: StepSchedule,
    lambda_schedule: StepSchedule,
    iterations: int = 10_000,
    seed: int = 0,
    batch_size: int = 1,
    theta0: Optional[Decision] = None,
    record_timing: bool = False,
) -> RunTrace:
    """β and λ stepped at their own rates, then jointly projected onto 𝕎."""
    for name, sched in (("beta", beta_schedule), ("lambda", lambda_schedule)):
        if not 0.5 < sched.tau < 1.0:
            raise ConfigurationError(f"{name} schedule needs tau in (1/2, 1), got {sched.tau!r}")
    if beta_schedule.tau <= lambda_schedule.tau:
        raise ConfigurationError(
            f"beta steps must vanish relative to lambda steps: need tau_beta > tau_lambda, "
            f"got {beta_schedule.tau!r} <= {lambda_schedule.tau!r}"
        )
    _check_smooth_regime(problem, consts, "sgd_two_timescale")

    def step(k, theta, grad):
        beta = theta.beta - beta_schedule.rate(k) * grad[:-1]
        return Decision(beta, theta.lam - lambda_schedule.rate(k) * grad[-1])

    return _run(
        _LoopSpec(
            method="two_timescale",
            problem=problem,
            theta0=theta0 or default_start(problem, consts),
            iterations=iterations,
            seed=seed,
            xi=0.0,
            batch_size=batch_size,
            cut_schedule=beta_schedule,
            step=step,
            project=lambda theta: project_W(theta, consts, problem.r_beta, problem.pinned),
            gradient=_dro_gradient(problem, consts, "auto", subgradient=False),
            objective=lambda theta: f_delta(problem, theta, ORACLE_CUTS, consts),
            feasible=lambda theta: in_W(theta, consts, problem.r_beta, tol=1e-9),
            record_timing=record_timing,
        )
    )


def nonrobust_gradient(problem: DroProblem, beta: FloatArray, indices: np.ndarray, rng=None) -> FloatArray:
    """Mean (sub)gradient of ℓ(βᵀX; Y) over a batch."""
    points = problem.data.points[indices]
    labels = problem.data.label_values()[indices]
    u = points @ beta
    upper = problem.loss.dplus(u, labels)
    if rng is not None:
        lower = problem.loss.dminus(u, labels)
        kinked = upper != lower
        if kinked.any():
            upper = np.where(kinked, rng.uniform(np.minimum(lower, upper), np.maximum(lower, upper)), upper)
    return np.mean(upper[:, None] * points, axis=0)


def sgd_baseline(
    problem: DroProblem,
    schedule: StepSchedule,
    xi: float = 0.0,
    iterations: int = 10_000,
    seed: int = 0,
    batch_size: int = 1,
    beta0: Optional[FloatArray] = None,
    record_timing: bool = False,
) -> RunTrace:
    """Projected SGD on the non-robust E_n[ℓ(βᵀX; Y)] over the decision ball.

    δ of ``problem`` is ignored. The sample stream matches the DRO run with the same seed;
    recorded decisions carry λ = 0.
    """
    data = problem.data

    def objective(theta):
        return float(np.mean(problem.loss.value(data.points @ theta.beta, data.label_values())))

    def gradient(theta, indices, cuts, rng):
        grad = nonrobust_gradient(problem, theta.beta, indices, rng if problem.loss.d2 is None else None)
        return np.append(grad, 0.0), 0

    def step(k, theta, grad):
        return Decision(theta.beta - schedule.rate(k) * grad[:-1], 0.0)

    start = problem.pin(np.zeros(data.d) if beta0 is None else beta0)
    return _run(
        _LoopSpec(
            method="baseline",
            problem=problem,
            theta0=Decision(start, 0.0),
            iterations=iterations,
            seed=seed,
            xi=xi,
            batch_size=batch_size,
            cut_schedule=schedule,
            step=step,
            project=lambda theta: Decision(project_ball(problem, theta.beta), 0.0),
            gradient=gradient,
            objective=objective,
            feasible=lambda theta: theta.beta_norm <= problem.r_beta * (1.0 + 1e-12),
            record_timing=record_timing,
        )
    )


# ------------------------------------------------------------
# Line searches over λ
# ------------------------------------------------------------


class GoldenSection(NamedTuple):
    x: float
    value: float
    brackets: tuple[tuple[float, float], ...]
    history: tuple[tuple[float, float], ...]


def golden_section(fn: Callable[[float], float], lower: float, upper: float, tol: float) -> GoldenSection:
    """Golden-section search for the minimum of a unimodal ``fn`` on [lower, upper]."""
    a, b = min(lower, upper), max(lower, upper)
    if not tol > 0:
        raise ConfigurationError(f"tolerance must be positive, got {tol!r}")
    history: list[tuple[float, float]] = []

    def probe(x):
        value = fn(x)
        history.append((x, value))
        return value

    h = b - a
    c, d = a + INV_PHI_SQ * h, a + INV_PHI * h
    yc, yd = probe(c), probe(d)
    brackets = [(a, b)]
    while b - a > tol:
        if yc < yd:
            b, d, yd = d, c, yc
            h = INV_PHI * h
            c = a + INV_PHI_SQ * h
            yc = probe(c)
        else:
            a, c, yc = c, d, yd
            h = INV_PHI * h
            d = a + INV_PHI * h
            yd = probe(d)
        brackets.append((a, b))
    x, value = (c, yc) if yc < yd else (d, yd)
    return GoldenSection(x, value, tuple(brackets), tuple(history))


def unimodality_violations(history: Sequence[tuple[float, float]], rtol: float = 1e-9) -> int:
    """Interior probes that sit above both neighbours once all probes are sorted by x."""
    probes = sorted((x, v) for x, v in history if math.isfinite(v))
    count = 0
    for (_, left), (_, mid), (_, right) in zip(probes, probes[1:], probes[2:]):
        if mid > max(left, right) + rtol * (1.0 + abs(mid)):
            count += 1
    return count


def line_search_outer(
    problem: DroProblem,
    consts: ConstantsBundle,
    inner_iterations: int = 500,
    lambda_tol: float = 1e-3,
    seed: int = 0,
    schedule: Optional[StepSchedule] = None,
    xi: float = 3.0,
    batch_size: int = 1,
) -> LineSearchResult:
    """Golden section over λ ∈ [0, K₂R_β] of h(λ) = inf_β f_δ(β, λ).

    Each h(λ) runs averaged projected SGD over β alone with the same seed, so h is a
    deterministic function of λ.
    """
    schedule = schedule or StepSchedule(0.5, 0.55)
    kappa_slope = problem.loss.kappa * problem.sqrt_delta
    minimizers: dict[float, FloatArray] = {}

    def h(lam: float) -> float:
        radius = problem.r_beta
        if kappa_slope > 0:
            radius = min(radius, 0.999 * math.sqrt(lam * problem.cost.rho_min / kappa_slope))
        if radius <= problem.pinned_norm:
            return math.inf
        sample_rng, _ = sample_streams(seed)
        points = problem.data.points
        beta = project_ball(problem, np.zeros(problem.data.d), radius)
        beta_bar = beta
        for k in range(1, inner_iterations + 1):
            indices = _draw_batch(sample_rng, problem.data.n, batch_size)
            cuts = schedule.cuts(k, float(np.max(np.linalg.norm(points[indices], axis=1))))
            theta = Decision(beta, lam)
            batch = solve_inner(problem, theta, indices, cuts, consts)
            grad = batch_gradient(problem, theta, batch)[:-1]
            grad[~problem.free_mask] = 0.0
            beta = project_ball(problem, beta - schedule.rate(k) * grad, radius)
            weight = (xi + 1.0) / (k + xi)
            beta_bar = (1.0 - weight) * beta_bar + weight * beta
        minimizers[lam] = beta_bar
        return f_delta(problem, Decision(beta_bar, lam), ORACLE_CUTS, consts)

    search = golden_section(h, 0.0, consts.lambda_cap, lambda_tol)
    violations = unimodality_violations(search.history)
    if violations:
        logger.warning("line_search_outer: %d probe(s) of h(λ) break unimodality", violations)
    return LineSearchResult(
        lambda_star=search.x,
        beta_star=minimizers[search.x],
        value=search.value,
        brackets=search.brackets,
        evaluations=len(search.history),
        unimodality_violations=violations,
    )


def solve_lambda_star(
    problem: DroProblem,
    beta: FloatArray,
    tol: float = 1e-10,
    consts: Optional[ConstantsBundle] = None,
    max_probes: int = 200,
) -> LambdaStar:
    """Root of λ ↦ E_n[g²a] − 1 on [λ_min(β), λ_max(β)] by bisection.

    When the root lies outside the bracket the nearer end is returned and flagged.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if not np.any(beta):
        return LambdaStar(0.0, 0.0, "lower", 0)
    lower, upper = lambda_bounds(problem, beta)
    threshold = lambda_thr(problem, beta)
    lower = max(lower, threshold * (1.0 + 1e-9) + 1e-300)
    upper = max(upper, lower)

    probes: list[tuple[float, float]] = []

    def excess(lam: float) -> float:
        batch = solve_inner(problem, Decision(beta, lam), None, ORACLE_CUTS, consts)
        value = float(np.mean(batch.g**2 * batch.a)) - 1.0
        probes.append((lam, value))
        return value

    def finish(lam, value, at_bound):
        ordered = sorted(probes)
        rises = sum(1 for (_, v0), (_, v1) in zip(ordered, ordered[1:]) if v1 > v0 + 1e-12 * (1.0 + abs(v0)))
        if rises:
            logger.warning("solve_lambda_star: E[g²a] rose with λ at %d probe pair(s)", rises)
        return LambdaStar(lam, abs(value), at_bound, len(probes))

    low_value = excess(lower)
    if low_value <= 0:
        return finish(lower, low_value, "lower")
    high_value = excess(upper)
    if high_value >= 0:
        return finish(upper, high_value, "upper")

    lam, value = lower, low_value
    for _ in range(max_probes):
        lam = 0.5 * (lower + upper)
        value = excess(lam)
        if abs(value) <= tol or upper - lower <= 4.0 * np.finfo(float).eps * upper:
            break
        if value > 0:
            lower = lam
        else:
            upper = lam
    return finish(lam, value, None)


# ------------------------------------------------------------
# Diagnostics
# ------------------------------------------------------------


def rate_diagnostic(
    trace: RunTrace, f_star: float, k_window: Optional[tuple[float, float]] = None
) -> RateFit:
    """Least-squares slope of log(f_δ(θ̄_k) − f*) against log k."""
    ks = trace.checkpoint_ks()
    gaps = trace.objective_values() - f_star
    if k_window is not None:
        inside = (ks >= k_window[0]) & (ks <= k_window[1])
        ks, gaps = ks[inside], gaps[inside]
    usable = np.isfinite(gaps) & (gaps > 0)
    excluded = int(np.count_nonzero(~usable))
    if excluded:
        logger.info("rate_diagnostic: %d checkpoint(s) with non-positive gap excluded", excluded)
    if np.count_nonzero(usable) < 2:
        raise NumericalError(
            f"need at least two positive gaps in the window, found {int(np.count_nonzero(usable))}"
        )
    slope, intercept = np.polyfit(np.log(ks[usable]), np.log(gaps[usable]), 1)
    return RateFit(float(slope), float(intercept), excluded, int(np.count_nonzero(usable)))


def envelope_constant(
    trace: RunTrace,
    f_star: float,
    floor: float = 0.0,
    k_window: Optional[tuple[float, float]] = None,
) -> float:
    """C in f_δ(θ̄_k) − f* ≈ floor + C·k^(−1/2), fitted in log space.

    Checkpoints whose gap does not exceed the floor carry no information about C
    and are left out.
    """
    ks = trace.checkpoint_ks()
    excess = trace.objective_values() - f_star - floor
    if k_window is not None:
        inside = (ks >= k_window[0]) & (ks <= k_window[1])
        ks, excess = ks[inside], excess[inside]
    usable = np.isfinite(excess) & (excess > 0)
    if not usable.any():
        raise NumericalError("no checkpoint gap exceeds the floor; the envelope constant is undefined")
    return float(np.exp(np.mean(np.log(excess[usable]) + 0.5 * np.log(ks[usable]))))
