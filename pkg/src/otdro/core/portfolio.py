"""Rolling-window mean-variance backtest under distributional ambiguity.

Weights w with wᵀ1 = 1 are written w = Qb for an orthogonal Q whose first column is 1/√d,
so the budget becomes the single pinned coordinate b₀ = 1/√d. The rotated returns Qᵀr carry
the same cost, since identity and scaled-identity costs commute with rotations. The target
return μ is the untransported label of the loss (u − μ)² − ζu and is found by golden section.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from otdro.core.datasets import read_numeric_frame
from otdro.core.dro_dataclasses import FrontierPoint, StepSchedule
from otdro.core.dual_objective import ORACLE_CUTS, f_delta
from otdro.core.errors import ConfigurationError, DataError, DegenerateBoundsError
from otdro.core.experiments import auto_step_size
from otdro.core.losses import make_mean_variance_loss
from otdro.core.models import (
    CostField,
    Decision,
    DroProblem,
    FloatArray,
    SampleSet,
    identity_cost,
    implied_vol_cost,
)
from otdro.core.optimizer import golden_section, sgd_baseline, sgd_nonsmooth, sgd_smooth
from otdro.core.regions import build_constants, estimate_L_bounds
from otdro.core.work_queue import run_keyed_jobs

logger = logging.getLogger(__name__)

CostKindName = Literal["constant", "implied-vol-scaled"]
MIN_WINDOW = 24
MONTHS_PER_YEAR = 12
# δ of problems solved by the non-robust baseline, which never reads it
_UNUSED_DELTA = 1.0


@dataclass(frozen=True)
class PortfolioSettings:
    r_beta: float = 2.0
    iterations: int = 2000
    tau: float = 0.55
    alpha: float | str = "auto"
    eta: float = 0.01
    mu_tol: float = 1e-6
    seed: int = 0


class PortfolioSolve(NamedTuple):
    weights: FloatArray
    mu: float
    value: float
    method: str


def budget_rotation(assets: int) -> FloatArray:
    """Orthogonal Q with Q[:, 0] = 1/√d."""
    if assets < 2:
        raise ConfigurationError(f"a portfolio needs at least two assets, got {assets!r}")
    seed = np.eye(assets)
    seed[:, 0] = 1.0 / math.sqrt(assets)
    Q, _ = np.linalg.qr(seed)
    if Q[0, 0] < 0:
        Q = -Q
    return Q


def _cost(kind: CostKindName, vols: Optional[FloatArray], assets: int) -> CostField:
    if kind == "constant":
        return identity_cost(assets)
    if kind == "implied-vol-scaled":
        if vols is None:
            raise ConfigurationError("the implied-vol-scaled cost needs a volatility series")
        return implied_vol_cost(vols, assets)
    raise ConfigurationError(f"unknown portfolio cost kind {kind!r}")


def solve_portfolio_weights(
    returns: FloatArray,
    zeta: float,
    delta: float,
    cost_kind: CostKindName = "constant",
    vols: Optional[FloatArray] = None,
    settings: PortfolioSettings = PortfolioSettings(),
) -> PortfolioSolve:
    """Robust mean-variance weights on one window of returns (rows are months).

    δ = 0 runs plain projected gradient descent; δ at or above δ₀ projects onto 𝕌_η instead of 𝕎.
    All runs are full batch, so the last iterate is reported.
    """
    returns = np.asarray(returns, dtype=np.float64)
    months, assets = returns.shape
    Q = budget_rotation(assets)
    rotated = returns @ Q
    pinned = ((0, 1.0 / math.sqrt(assets)),)
    cost = _cost(cost_kind, vols, assets)
    alpha = (
        auto_step_size(rotated, 2.0) if settings.alpha == "auto" else float(settings.alpha)
    )
    loss = make_mean_variance_loss(zeta)
    method = "baseline" if delta == 0 else "smooth"
    solutions: dict[float, Decision] = {}

    def solve(mu: float) -> float:
        nonlocal method
        data = SampleSet(rotated, np.full(months, mu))
        problem = DroProblem(
            data, cost, loss, delta if delta > 0 else _UNUSED_DELTA, settings.r_beta, pinned=pinned
        )
        if delta == 0:
            trace = sgd_baseline(
                problem,
                StepSchedule(alpha, settings.tau),
                iterations=settings.iterations,
                seed=settings.seed,
                batch_size=months,
            )
            solutions[mu] = trace.theta
            return float(np.mean(loss.value(rotated @ trace.theta.beta, mu)))
        try:
            consts = build_constants(problem, estimate_L_bounds(problem, seed=settings.seed))
        except DegenerateBoundsError:
            consts = None
        if consts is not None and consts.smooth_regime:
            trace = sgd_smooth(
                problem,
                consts,
                StepSchedule(alpha, settings.tau),
                iterations=settings.iterations,
                seed=settings.seed,
                batch_size=months,
            )
            value = f_delta(problem, trace.theta, ORACLE_CUTS, consts)
        else:
            method = "nonsmooth"
            trace = sgd_nonsmooth(
                problem,
                StepSchedule(alpha, 0.5),
                settings.eta,
                iterations=settings.iterations,
                seed=settings.seed,
                batch_size=months,
            )
            value = f_delta(problem, trace.theta)
        solutions[mu] = trace.theta
        return value

    spread = float(np.max(np.abs(returns))) + abs(zeta)
    search = golden_section(solve, float(returns.min()) - spread, float(returns.max()) + spread, settings.mu_tol)
    weights = Q @ solutions[search.x].beta
    return PortfolioSolve(weights, search.x, search.value, method)


# ------------------------------------------------------------
# Backtest
# ------------------------------------------------------------


def read_return_series(
    returns: pd.DataFrame | str | Path, vols: pd.DataFrame | str | Path | None
) -> tuple[pd.DataFrame, Optional[pd.Series]]:
    """Load and align monthly returns with their volatility index (first column or ``vol``)."""
    if not isinstance(returns, pd.DataFrame):
        returns = read_numeric_frame(returns, index="month")
    if vols is not None and not isinstance(vols, pd.DataFrame):
        vols = read_numeric_frame(vols, index="month")
    bad = ~np.isfinite(returns.to_numpy())
    if bad.any():
        row, column = np.argwhere(bad)[0]
        raise DataError("NaN or infinite return", row=int(row) + 2, column=str(returns.columns[column]))
    if vols is None:
        return returns, None
    series = vols["vol"] if "vol" in vols.columns else vols.iloc[:, 0]
    if not returns.index.equals(series.index):
        raise ConfigurationError(
            f"returns and volatility series are misaligned: {len(returns)} vs {len(series)} months"
        )
    if not np.all(np.isfinite(series.to_numpy())) or np.any(series.to_numpy() <= 0):
        raise DataError("volatility series must be finite and positive")
    return returns, series


def backtest_cell(
    returns: pd.DataFrame,
    vols: Optional[pd.Series],
    window_months: int,
    zeta: float,
    delta: float,
    cost_kind: CostKindName,
    settings: PortfolioSettings,
) -> FrontierPoint:
    """Re-solve on each trailing window, hold the weights one month, annualize realized returns."""
    values = returns.to_numpy()
    vol_values = None if vols is None else vols.to_numpy()
    realized = []
    for t in range(window_months, len(values)):
        window = slice(t - window_months, t)
        solve = solve_portfolio_weights(
            values[window],
            zeta,
            delta,
            cost_kind,
            None if vol_values is None else vol_values[window],
            settings,
        )
        realized.append(float(values[t] @ solve.weights))
    realized = np.asarray(realized)
    std = float(np.std(realized, ddof=1)) if realized.size > 1 else 0.0
    return FrontierPoint(
        zeta=zeta,
        delta=delta,
        mean_return=float(np.mean(realized)) * MONTHS_PER_YEAR,
        std_return=std * math.sqrt(MONTHS_PER_YEAR),
        cost_kind=cost_kind,
    )


def run_portfolio_frontier(
    returns_csv: pd.DataFrame | str | Path,
    vol_csv: pd.DataFrame | str | Path | None,
    window_months: int,
    zeta_grid: Sequence[float],
    delta_grid: Sequence[float],
    cost_kind: CostKindName | Iterable[CostKindName] = "constant",
    settings: PortfolioSettings = PortfolioSettings(),
    workers: Optional[int] = None,
) -> list[FrontierPoint]:
    """One annualized (mean, std) point per (ζ, δ, cost_kind), ordered by that key."""
    returns, vols = read_return_series(returns_csv, vol_csv)
    if window_months < MIN_WINDOW:
        raise ConfigurationError(f"window_months must be at least {MIN_WINDOW}, got {window_months!r}")
    if window_months >= len(returns):
        raise ConfigurationError(
            f"window of {window_months} months leaves no month to hold out in {len(returns)} months of history"
        )
    kinds = (cost_kind,) if isinstance(cost_kind, str) else tuple(cost_kind)
    if "implied-vol-scaled" in kinds and vols is None:
        raise ConfigurationError("the implied-vol-scaled cost needs a volatility series")
    if any(d < 0 for d in delta_grid):
        raise ConfigurationError(f"delta_grid must be nonnegative, got {list(delta_grid)!r}")

    jobs = {
        (float(zeta), float(delta), kind): (
            lambda zeta=zeta, delta=delta, kind=kind: backtest_cell(
                returns, vols, window_months, float(zeta), float(delta), kind, settings
            )
        )
        for zeta in zeta_grid
        for delta in delta_grid
        for kind in kinds
    }
    logger.info("frontier: %d cell(s) over %d month(s)", len(jobs), len(returns) - window_months)
    return [point for _, point in run_keyed_jobs(jobs, workers)]


def frontier_frame(points: Sequence[FrontierPoint]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "zeta": [p.zeta for p in points],
            "delta": [p.delta for p in points],
            "cost_kind": [p.cost_kind for p in points],
            "mean_return": [p.mean_return for p in points],
            "std_return": [p.std_return for p in points],
        }
    )
