"""Experiment drivers behind the CLI: training runs, the DRO vs non-DRO comparison and
worst-case traces. The portfolio backtest lives in ``otdro.core.portfolio``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from otdro.core.config import RunConfig
from otdro.core.datasets import (
    CsvSchema,
    load_csv,
    make_classification_sample,
    make_regression_sample,
    read_numeric_frame,
)
from otdro.core.dro_dataclasses import (
    ConstantsBundle,
    LineSearchResult,
    RunTrace,
    StaticsTrace,
    StepSchedule,
    WorstCaseRegime,
)
from otdro.core.errors import ConfigurationError
from otdro.core.losses import loss_by_name
from otdro.core.models import (
    CostField,
    DroProblem,
    FloatArray,
    SampleSet,
    constant_cost,
    identity_cost,
    implied_vol_cost,
)
from otdro.core.optimizer import (
    line_search_outer,
    sgd_baseline,
    sgd_nonsmooth,
    sgd_smooth,
    sgd_two_timescale,
)
from otdro.core.regions import build_constants, estimate_L_bounds
from otdro.core.worstcase import comparative_statics

logger = logging.getLogger(__name__)

CLASSIFICATION_LOSSES = ("logistic", "hinge")
CSV_FLOAT_FORMAT = "%.12g"


# ------------------------------------------------------------
# Building problems from a configuration
# ------------------------------------------------------------


def load_samples(config: RunConfig) -> SampleSet:
    """CSV data when ``data.path`` is set, else the synthetic generator matching the loss."""
    if config.data_path is not None:
        schema = CsvSchema(features=config.data_features, label=config.data_label)
        return load_csv(config.data_path, schema)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    n, d = config.synthetic_n, config.synthetic_d
    if config.loss in CLASSIFICATION_LOSSES:
        return make_classification_sample(n, d, config.synthetic_separation, rng)
    if config.loss == "squared":
        return make_regression_sample(n, d, config.synthetic_noise, rng)
    raise ConfigurationError(f"no synthetic generator for loss {config.loss!r}; set data.path")


def cost_from_config(config: RunConfig, data: SampleSet) -> CostField:
    match config.cost:
        case "identity":
            return identity_cost(data.d)
        case "constant":
            return constant_cost(config.cost_matrix)
        case "implied_vol":
            if config.cost_volatility_path is None:
                raise ConfigurationError("cost.volatility_path is required for the implied_vol cost")
            vols = read_numeric_frame(config.cost_volatility_path)
            if "vol" not in vols.columns:
                raise ConfigurationError(f"{config.cost_volatility_path!r} needs a 'vol' column")
            if len(vols) != data.n:
                raise ConfigurationError(
                    f"volatility series has {len(vols)} rows, data has {data.n} points"
                )
            return implied_vol_cost(vols["vol"].to_numpy(), data.d)
    raise ConfigurationError(f"unknown cost kind {config.cost!r}")


def problem_from_config(config: RunConfig, data: Optional[SampleSet] = None) -> DroProblem:
    data = data or load_samples(config)
    if config.loss in CLASSIFICATION_LOSSES and (
        data.labels is None or not np.all(np.isin(data.labels, (-1.0, 1.0)))
    ):
        raise ConfigurationError(f"loss {config.loss!r} needs labels in {{-1, +1}}")
    return DroProblem(
        data=data,
        cost=cost_from_config(config, data),
        loss=loss_by_name(config.loss, config.zeta),
        delta=config.delta,
        r_beta=config.r_beta,
        nondegeneracy=config.nondegeneracy,
    )


def constants_from_config(config: RunConfig, problem: DroProblem) -> Optional[ConstantsBundle]:
    """Constants for smooth losses; None for piecewise losses, which have no 𝕎."""
    if problem.loss.d2 is None or problem.loss.M is None:
        return None
    bounds = estimate_L_bounds(problem, seed=config.seed, override=config.L_bounds)
    return build_constants(problem, bounds)


def auto_step_size(points: FloatArray, curvature: float) -> float:
    """1/L for L = curvature·λ_max(E_n[XXᵀ]), the smoothness of β ↦ E_n[ℓ(βᵀX)]."""
    second_moment = points.T @ points / points.shape[0]
    top = float(np.linalg.eigvalsh(second_moment)[-1])
    scale = curvature if curvature > 0 else 1.0
    if top <= 0:
        raise ConfigurationError("data has no spread; step.alpha cannot be chosen automatically")
    return 1.0 / (scale * top)


def step_alpha(config: RunConfig, problem: DroProblem) -> float:
    if config.step_alpha == "auto":
        return auto_step_size(problem.data.points, problem.loss.curvature)
    return float(config.step_alpha)


# ------------------------------------------------------------
# Training
# ------------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    method: str
    problem: DroProblem
    consts: Optional[ConstantsBundle]
    trace: Optional[RunTrace] = None
    line_search: Optional[LineSearchResult] = None

    @property
    def beta(self) -> FloatArray:
        if self.trace is not None:
            return self.trace.theta_bar.beta
        return self.line_search.beta_star

    def summary(self, include_timing: bool = False) -> dict:
        summary: dict = {"method": self.method, "delta": self.problem.delta}
        if self.consts is not None:
            summary["constants"] = self.consts.to_json()
        if self.trace is not None:
            summary.update(self.trace.summary(include_timing))
        if self.line_search is not None:
            result = self.line_search
            summary.update(
                {
                    "lambda_star": result.lambda_star,
                    "beta_star": [float(b) for b in result.beta_star],
                    "value": result.value,
                    "evaluations": result.evaluations,
                    "unimodality_violations": result.unimodality_violations,
                }
            )
        return summary


def _run_dro_arm(config: RunConfig, problem: DroProblem, consts, method: str) -> RunTrace:
    alpha = step_alpha(config, problem)
    common = dict(iterations=config.iterations, seed=config.seed, batch_size=config.batch_size,
                  record_timing=config.record_timing)
    match method:
        case "smooth":
            return sgd_smooth(problem, consts, StepSchedule(alpha, config.step_tau), xi=config.step_xi, **common)
        case "nonsmooth":
            return sgd_nonsmooth(
                problem, StepSchedule(alpha, 0.5), config.eta, xi=max(1.0, config.step_xi), **common
            )
        case "two_timescale":
            return sgd_two_timescale(
                problem,
                consts,
                StepSchedule(alpha, config.step_tau),
                StepSchedule(config.lambda_step_alpha, config.lambda_step_tau),
                **common,
            )
    raise ConfigurationError(f"method {method!r} does not produce an SGD trace")


def run_training(config: RunConfig, data: Optional[SampleSet] = None) -> TrainResult:
    problem = problem_from_config(config, data)
    method = config.resolved_method
    consts = constants_from_config(config, problem)
    if method in ("smooth", "two_timescale", "line_search") and consts is None:
        raise ConfigurationError(f"method {method!r} needs a smooth loss, got {config.loss!r}")
    logger.info("training %s on n=%d, d=%d, delta=%.6g", method, problem.data.n, problem.data.d, problem.delta)
    if method == "line_search":
        alpha = step_alpha(config, problem)
        result = line_search_outer(
            problem,
            consts,
            inner_iterations=config.inner_iterations,
            lambda_tol=config.lambda_tol,
            seed=config.seed,
            schedule=StepSchedule(alpha, config.step_tau),
            xi=config.step_xi,
            batch_size=config.batch_size,
        )
        return TrainResult(method, problem, consts, line_search=result)
    return TrainResult(method, problem, consts, trace=_run_dro_arm(config, problem, consts, method))


# ------------------------------------------------------------
# DRO vs non-DRO
# ------------------------------------------------------------


class TracePair(NamedTuple):
    dro: RunTrace
    baseline: RunTrace


def run_supervised_experiment(config: RunConfig, data: Optional[SampleSet] = None) -> TracePair:
    """DRO run and plain projected SGD (δ = 0) with the same steps, seed and sample stream."""
    if config.loss not in ("logistic", "squared", "hinge"):
        raise ConfigurationError(f"supervised experiments take logistic, squared or hinge, got {config.loss!r}")
    problem = problem_from_config(config, data)
    method = config.resolved_method
    if method == "line_search":
        raise ConfigurationError("the comparison needs an SGD method, not 'line_search'")
    consts = constants_from_config(config, problem)
    dro = _run_dro_arm(config, problem, consts, method)

    alpha = step_alpha(config, problem)
    match method:
        case "nonsmooth":
            schedule, xi = StepSchedule(alpha, 0.5), max(1.0, config.step_xi)
        case "two_timescale":
            schedule, xi = StepSchedule(alpha, config.step_tau), 0.0
        case _:
            schedule, xi = StepSchedule(alpha, config.step_tau), config.step_xi
    baseline = sgd_baseline(
        problem,
        schedule,
        xi=xi,
        iterations=config.iterations,
        seed=config.seed,
        batch_size=config.batch_size,
        record_timing=config.record_timing,
    )
    return TracePair(dro, baseline)


def gap_frame(pair: TracePair) -> pd.DataFrame:
    """Columns k, arm, objective, gap; each arm's gap is measured from its best checkpoint."""
    frames = []
    for arm, trace in (("dro", pair.dro), ("baseline", pair.baseline)):
        objective = trace.objective_values()
        frames.append(
            pd.DataFrame(
                {
                    "k": trace.checkpoint_ks().astype(np.int64),
                    "arm": arm,
                    "objective": objective,
                    "gap": objective - np.min(objective),
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


# ------------------------------------------------------------
# Worst-case traces
# ------------------------------------------------------------


@dataclass(frozen=True)
class WorstCaseTrace:
    beta: FloatArray
    transports: pd.DataFrame
    rates: pd.DataFrame
    statics: Optional[StaticsTrace]


def _transport_rows(problem, beta, delta, x_star, G, regime) -> pd.DataFrame:
    points = problem.data.points
    labels = problem.data.label_values()
    d = problem.data.d
    frame = pd.DataFrame({"delta": delta, "i": np.arange(problem.data.n), "regime": regime})
    for j in range(d):
        frame[f"x_{j + 1}"] = points[:, j]
    frame["G"] = G
    for j in range(d):
        frame[f"x_star_{j + 1}"] = x_star[:, j]
    frame["displacement"] = np.linalg.norm(x_star - points, axis=1)
    frame["loss_before"] = problem.loss.value(points @ beta, labels)
    frame["loss_after"] = problem.loss.value(x_star @ beta, labels)
    return frame


def run_worstcase_trace(
    config: RunConfig, beta: Optional[FloatArray] = None, data: Optional[SampleSet] = None
) -> WorstCaseTrace:
    """Hold β fixed and follow X*_δ across ``delta_grid``.

    β comes from the argument, then ``beta`` in the configuration, then a training run.
    A δ = 0 grid point reproduces the raw data.
    """
    problem = problem_from_config(config, data)
    if beta is None and config.beta is not None:
        beta = np.asarray(config.beta, dtype=np.float64)
    if beta is None:
        beta = run_training(config, problem.data).beta
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (problem.data.d,):
        raise ConfigurationError(f"beta must have dimension {problem.data.d}, got shape {beta.shape!r}")

    grid = sorted(set(float(d) for d in config.delta_grid))
    if not grid or grid[0] < 0:
        raise ConfigurationError(f"delta_grid must be nonempty and nonnegative, got {list(config.delta_grid)!r}")
    positive = [d for d in grid if d > 0]
    delta1 = None
    if problem.nondegeneracy is not None:
        consts = constants_from_config(config, problem)
        delta1 = consts.delta1 if consts is not None else None
    statics = comparative_statics(problem, beta, positive, delta1=delta1) if positive else None

    labels = problem.data.label_values()
    classification = config.loss in CLASSIFICATION_LOSSES
    frames, rates = [], []
    transports = iter(statics.transports if statics else ())
    for delta in grid:
        if delta == 0:
            x_star, G, regime = np.array(problem.data.points), np.zeros(problem.data.n), "baseline"
            budget = 0.0
        else:
            transport = next(transports)
            x_star, G, regime = transport.x_star, transport.G, transport.regime.value
            budget = transport.budget
        frames.append(_transport_rows(problem, beta, delta, x_star, G, regime))
        row = {"delta": delta, "regime": regime, "budget": budget}
        if classification:
            if regime == WorstCaseRegime.NONEXISTENT.value:
                row["misclassification"] = np.nan
            else:
                row["misclassification"] = float(np.mean(labels * (x_star @ beta) <= 0))
        rates.append(row)
    logger.info("worst-case trace over %d delta value(s)", len(grid))
    return WorstCaseTrace(beta, pd.concat(frames, ignore_index=True), pd.DataFrame(rates), statics)
