from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, List, Literal, Optional

import numpy as np

from otdro.core.errors import ConfigurationError
from otdro.core.models import Decision, FloatArray


@dataclass(frozen=True)
class InnerSolution:
    """Solution of the univariate maximization of F(·, β, λ; x)."""

    g: float
    lrob: float
    x_tilde: FloatArray
    residual: float
    cuts_used: int
    a: float = 0.0
    certified: bool = True


@dataclass(frozen=True)
class SubgradientSample:
    d_beta: FloatArray
    d_lambda: float
    lprime_choice: float

    def as_vector(self) -> FloatArray:
        return np.append(self.d_beta, self.d_lambda)


@dataclass(frozen=True)
class ConstantsBundle:
    L_lower: float
    L_upper: float
    K1: float
    K2: float
    K2_table: float
    delta0: float
    delta1: Optional[float]
    phi_min: float
    kappa0: float
    estimated: bool
    delta: float
    r_beta: float
    delta2: Optional[float] = None

    @property
    def smooth_regime(self) -> bool:
        return self.delta < self.delta0

    @property
    def lambda_cap(self) -> float:
        """Upper edge K₂R_β of 𝕎."""
        return self.K2 * self.r_beta

    def to_json(self) -> dict[str, Any]:
        return {
            "L_lower": self.L_lower,
            "L_upper": self.L_upper,
            "K1": self.K1,
            "K2": self.K2,
            "K2_table": self.K2_table,
            "delta0": self.delta0,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "phi_min": self.phi_min,
            "kappa0": self.kappa0,
            "estimated": self.estimated,
            "delta": self.delta,
            "r_beta": self.r_beta,
            "smooth_regime": self.smooth_regime,
        }


@dataclass(frozen=True)
class StepSchedule:
    """α_k = α·k^(−τ)."""

    alpha: float
    tau: float

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ConfigurationError(f"step alpha must be positive, got {self.alpha!r}")
        if not 0.5 <= self.tau <= 1.0:
            raise ConfigurationError(f"step tau must lie in [1/2, 1], got {self.tau!r}")

    def rate(self, k: int) -> float:
        return self.alpha * k ** (-self.tau)

    def cuts(self, k: int, sample_norm: float, floor: int = 10) -> int:
        """Bisection cuts that keep the line-search bias below the step size at iteration k."""
        raw = self.tau * math.log2(k) - math.log2(self.alpha) + 2.0 * math.log2(1.0 + sample_norm)
        return max(floor, math.ceil(raw))


@dataclass(frozen=True)
class TraceRecord:
    k: int
    theta: Decision
    theta_bar: Decision
    f_delta: float
    cuts: int
    elapsed_ms: Optional[float] = None

    def to_json(self, include_timing: bool = False) -> dict[str, Any]:
        record: dict[str, Any] = {
            "k": self.k,
            "theta": self.theta.to_json(),
            "theta_bar": self.theta_bar.to_json(),
            "f_delta": _finite_or_none(self.f_delta),
            "cuts": self.cuts,
        }
        if include_timing:
            record["elapsed_ms"] = self.elapsed_ms
        return record


@dataclass
class RunTrace:
    method: str
    seed: int
    iterations: int
    theta: Decision
    theta_bar: Decision
    records: List[TraceRecord] = field(default_factory=list)
    total_cuts: int = 0
    fallback_solves: int = 0
    elapsed_ms: float = 0.0

    # ---- Helpers for working with checkpoints ----

    def checkpoint(self, record: TraceRecord) -> None:
        self.records.append(record)

    def checkpoint_ks(self) -> FloatArray:
        return np.array([r.k for r in self.records], dtype=np.float64)

    def objective_values(self) -> FloatArray:
        return np.array([r.f_delta for r in self.records], dtype=np.float64)

    def summary(self, include_timing: bool = False) -> dict[str, Any]:
        """Final state of the run, JSON ready."""
        summary: dict[str, Any] = {
            "method": self.method,
            "seed": self.seed,
            "iterations": self.iterations,
            "theta": self.theta.to_json(),
            "theta_bar": self.theta_bar.to_json(),
            "f_delta": _finite_or_none(self.records[-1].f_delta) if self.records else None,
            "total_cuts": self.total_cuts,
            "fallback_solves": self.fallback_solves,
        }
        if include_timing:
            summary["elapsed_ms"] = self.elapsed_ms
        return summary


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    excluded: int
    used: int


@dataclass(frozen=True)
class LineSearchResult:
    lambda_star: float
    beta_star: FloatArray
    value: float
    brackets: tuple[tuple[float, float], ...]
    evaluations: int
    unimodality_violations: int = 0


@dataclass(frozen=True)
class LambdaStar:
    lam: float
    residual: float
    at_bound: Optional[Literal["lower", "upper"]] = None
    probes: int = 0


class WorstCaseRegime(str, Enum):
    UNIQUE = "unique"
    RANDOMIZED = "randomized"
    NONEXISTENT = "nonexistent"
    CONSTANT_LOSS = "constant-loss"


@dataclass(frozen=True)
class Randomization:
    g_minus: FloatArray
    g_plus: FloatArray
    bernoulli_p: float
    grid_points: int


@dataclass(frozen=True)
class WorstCaseTransport:
    delta: float
    regime: WorstCaseRegime
    lam: float
    G: FloatArray
    x_star: FloatArray
    directions: FloatArray
    budget: float
    expected_loss: float
    dual_value: float
    certified: bool = True
    randomization: Optional[Randomization] = None

    @property
    def displacement(self) -> FloatArray:
        return np.abs(self.G) * math.sqrt(self.delta) * np.linalg.norm(self.directions, axis=1)

    def sample(self, rng: np.random.Generator) -> FloatArray:
        """One draw of X*; only the randomized regime is random."""
        if self.randomization is None:
            return self.x_star
        r = self.randomization
        use_minus = rng.random() < r.bernoulli_p
        g = r.g_minus if use_minus else r.g_plus
        return self.x_star - (self.G * math.sqrt(self.delta))[:, None] * self.directions + (
            g * math.sqrt(self.delta)
        )[:, None] * self.directions


@dataclass(frozen=True)
class StaticsTrace:
    transports: tuple[WorstCaseTransport, ...]
    monotone_violations: int
    min_cosine: float
    flagged_deltas: tuple[float, ...]


@dataclass(frozen=True)
class OracleReport:
    """Fast value against an oracle value.

    ``bound`` says how they are compared: ``within`` tolerance of each other, fast
    ``at_most`` oracle + tolerance, or fast strictly ``above`` oracle + tolerance.
    """

    quantity: str
    oracle_value: float
    fast_value: float
    abs_error: float
    rel_error: float
    tolerance: float
    parameters: dict[str, Any] = field(default_factory=dict)
    bound: Literal["within", "at_most", "above"] = "within"

    @classmethod
    def compare(
        cls, quantity: str, oracle_value: float, fast_value: float, tolerance: float, **parameters: Any
    ) -> "OracleReport":
        abs_error = abs(float(oracle_value) - float(fast_value))
        rel_error = abs_error / max(abs(float(oracle_value)), 1e-300)
        return cls(quantity, float(oracle_value), float(fast_value), abs_error, rel_error, tolerance, parameters)

    @classmethod
    def at_most(
        cls, quantity: str, ceiling: float, fast_value: float, tolerance: float = 0.0, **parameters: Any
    ) -> "OracleReport":
        return replace(cls.compare(quantity, ceiling, fast_value, tolerance, **parameters), bound="at_most")

    @classmethod
    def above(
        cls, quantity: str, floor: float, fast_value: float, tolerance: float = 0.0, **parameters: Any
    ) -> "OracleReport":
        return replace(cls.compare(quantity, floor, fast_value, tolerance, **parameters), bound="above")

    @classmethod
    def crashed(cls, error: BaseException) -> "OracleReport":
        return cls(
            type(error).__name__, math.nan, math.nan, math.inf, math.inf, 0.0, {"error": str(error)}
        )

    @property
    def passed(self) -> bool:
        if self.bound == "at_most":
            return self.fast_value <= self.oracle_value + self.tolerance
        if self.bound == "above":
            return self.fast_value > self.oracle_value + self.tolerance
        return self.abs_error <= self.tolerance

    def to_json(self) -> dict[str, Any]:
        return {
            "quantity": self.quantity,
            "oracle": _finite_or_none(self.oracle_value),
            "fast": _finite_or_none(self.fast_value),
            "abs_error": _finite_or_none(self.abs_error),
            "rel_error": _finite_or_none(self.rel_error),
            "tolerance": self.tolerance,
            "bound": self.bound,
            "passed": self.passed,
            "parameters": self.parameters,
        }


@dataclass(frozen=True)
class HessianProbe:
    """Finite-difference curvature of f_δ at sampled decisions."""

    min_eigenvalues: FloatArray
    chord_modulus: float
    skipped: int


@dataclass(frozen=True)
class FrontierPoint:
    zeta: float
    delta: float
    mean_return: float
    std_return: float
    cost_kind: Literal["constant", "implied-vol-scaled"]


def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None
