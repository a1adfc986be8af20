from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from otdro.core.errors import ConfigurationError

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
ScalarFn = Callable[[ArrayLike, ArrayLike], FloatArray]


def _frozen_array(values: ArrayLike, ndim: int, name: str) -> FloatArray:
    try:
        array = np.array(values, dtype=np.float64, copy=True)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{name} must be numeric: {exc}") from exc
    if ndim == 2 and array.ndim == 1:
        array = array.reshape(-1, 1)
    if array.ndim != ndim:
        raise ConfigurationError(f"{name} must be {ndim}-dimensional, got shape {array.shape!r}")
    if not np.all(np.isfinite(array)):
        raise ConfigurationError(f"{name} contains non-finite values")
    array.setflags(write=False)
    return array


# ------------------------------------------------------------
# Samples
# ------------------------------------------------------------


@dataclass(frozen=True)
class SampleSet:
    """Empirical baseline distribution: n points in R^d with optional labels.

    Labels parametrise the loss and are never transported.
    """

    points: FloatArray
    labels: Optional[FloatArray] = None

    def __post_init__(self) -> None:
        points = _frozen_array(self.points, 2, "points")
        if points.shape[0] < 1:
            raise ConfigurationError("a sample set needs at least one point")
        object.__setattr__(self, "points", points)
        if self.labels is not None:
            labels = _frozen_array(self.labels, 1, "labels")
            if labels.shape[0] != points.shape[0]:
                raise ConfigurationError(
                    f"expected {points.shape[0]} labels, got {labels.shape[0]}"
                )
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    @property
    def d(self) -> int:
        return int(self.points.shape[1])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def label_values(self) -> FloatArray:
        """Labels, or zeros when the loss takes no label."""
        if self.labels is None:
            return np.zeros(self.n)
        return self.labels

    def with_labels(self, labels: ArrayLike) -> "SampleSet":
        return SampleSet(self.points, np.asarray(labels, dtype=np.float64))


# ------------------------------------------------------------
# Losses
# ------------------------------------------------------------


@dataclass(frozen=True)
class LossComponent:
    """One smooth convex piece ℓ_i of a loss ℓ = max_i ℓ_i."""

    value: ScalarFn
    deriv: ScalarFn
    d2: Optional[ScalarFn]
    M: float


@dataclass(frozen=True)
class LossSpec:
    name: str
    value: ScalarFn
    dplus: ScalarFn
    dminus: ScalarFn
    d2: Optional[ScalarFn]
    components: tuple[LossComponent, ...]
    kappa: float
    M: Optional[float]
    k1: Optional[float] = None
    k2: Optional[float] = None
    # ℓ(u;y) = (u − center(y))² + offset(y) for quadratic losses
    quadratic_center: Optional[Callable[[ArrayLike], FloatArray]] = None
    quadratic_offset: Optional[Callable[[ArrayLike], FloatArray]] = None
    k1_from_labels: bool = False

    def __post_init__(self) -> None:
        if not self.components:
            raise ConfigurationError(f"loss {self.name!r} needs at least one component")
        if self.kappa < 0:
            raise ConfigurationError(f"kappa must be nonnegative, got {self.kappa!r}")
        if self.M is not None and self.M <= 0:
            raise ConfigurationError(f"M must be positive, got {self.M!r}")
        if self.M is not None and self.kappa > self.M / 2 + 1e-15:
            raise ConfigurationError(
                f"kappa={self.kappa!r} exceeds M/2={self.M / 2!r} for loss {self.name!r}"
            )

    @property
    def smooth(self) -> bool:
        return self.d2 is not None and len(self.components) == 1

    @property
    def quadratic(self) -> bool:
        return self.quadratic_center is not None

    @property
    def curvature(self) -> float:
        """Bound on ℓ″ used by λ′_thr; piecewise-affine losses have zero curvature."""
        if self.M is not None:
            return float(self.M)
        return float(max(c.M for c in self.components))

    def derivative(self, u: ArrayLike, y: ArrayLike) -> FloatArray:
        return self.dplus(u, y)

    def bind(self, data: SampleSet) -> "LossSpec":
        """Fix constants that depend on the sample set."""
        if self.k1_from_labels and data.labels is not None:
            return replace(self, k1=float(np.max(np.abs(data.labels))))
        return self


# ------------------------------------------------------------
# Cost fields
# ------------------------------------------------------------


class CostKind(str, Enum):
    IDENTITY = "identity"
    CONSTANT = "constant"
    SCALED = "scaled"
    CALLBACK = "callback"


@dataclass(frozen=True)
class CostField:
    """Per-point positive definite matrices A(x) of the transport cost (x−x′)ᵀA(x)(x−x′).

    * identity: A = I
    * constant: A fixed
    * scaled: A_i = s_i·B with B = I unless given (implied-volatility rule s_i = V̄/V_i)
    * callback: A(x) from a callable, spectral bounds supplied by the caller
    """

    kind: CostKind
    dim: int
    rho_min: float
    rho_max: float
    matrix: Optional[FloatArray] = None
    scales: Optional[FloatArray] = None
    callback: Optional[Callable[[FloatArray], ArrayLike]] = None
    _inverse: Optional[FloatArray] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.rho_min <= 0 or self.rho_max < self.rho_min:
            raise ConfigurationError(
                f"need 0 < rho_min <= rho_max, got ({self.rho_min!r}, {self.rho_max!r})"
            )
        if self.matrix is not None:
            inverse = linalg.cho_solve(_cholesky(self.matrix), np.eye(self.dim))
            inverse.setflags(write=False)
            object.__setattr__(self, "_inverse", inverse)

    @property
    def per_sample(self) -> bool:
        return self.kind in (CostKind.SCALED, CostKind.CALLBACK)

    def matrix_at(self, x_index: int, point: Optional[FloatArray] = None) -> FloatArray:
        match self.kind:
            case CostKind.IDENTITY:
                return np.eye(self.dim)
            case CostKind.CONSTANT:
                return np.array(self.matrix)
            case CostKind.SCALED:
                base = np.eye(self.dim) if self.matrix is None else self.matrix
                return self.scales[x_index] * base
            case CostKind.CALLBACK:
                if point is None:
                    raise ConfigurationError("callback cost fields need the sample point")
                return np.asarray(self.callback(point), dtype=np.float64)

    def solve(self, beta: FloatArray, x_index: int, point: Optional[FloatArray] = None) -> FloatArray:
        """A(X_i)⁻¹β."""
        beta = np.asarray(beta, dtype=np.float64)
        match self.kind:
            case CostKind.IDENTITY:
                return beta.copy()
            case CostKind.CONSTANT:
                return self._inverse @ beta
            case CostKind.SCALED:
                base = beta if self._inverse is None else self._inverse @ beta
                return base / self.scales[x_index]
            case CostKind.CALLBACK:
                factor = _cholesky(self.matrix_at(x_index, point))
                return linalg.cho_solve(factor, beta)

    def solve_all(self, beta: FloatArray, points: FloatArray) -> FloatArray:
        """A(X_i)⁻¹β for every row of ``points``, shape (n, d)."""
        beta = np.asarray(beta, dtype=np.float64)
        n = points.shape[0]
        match self.kind:
            case CostKind.IDENTITY:
                return np.broadcast_to(beta, (n, self.dim)).copy()
            case CostKind.CONSTANT:
                return np.broadcast_to(self._inverse @ beta, (n, self.dim)).copy()
            case CostKind.SCALED:
                self._check_scales(n)
                base = beta if self._inverse is None else self._inverse @ beta
                return np.outer(1.0 / self.scales, base)
            case CostKind.CALLBACK:
                return np.stack([self.solve(beta, i, points[i]) for i in range(n)])

    def quadratic_forms(self, beta: FloatArray, points: FloatArray) -> FloatArray:
        """a_i = βᵀA(X_i)⁻¹β for every row of ``points``."""
        return self.solve_all(beta, points) @ np.asarray(beta, dtype=np.float64)

    def worst_inverse(self) -> Optional[FloatArray]:
        """P with max_i βᵀA(X_i)⁻¹β = βᵀPβ, when one exists."""
        match self.kind:
            case CostKind.IDENTITY:
                return np.eye(self.dim)
            case CostKind.CONSTANT:
                return np.array(self._inverse)
            case CostKind.SCALED:
                base = np.eye(self.dim) if self._inverse is None else np.array(self._inverse)
                return base / float(np.min(self.scales))
            case CostKind.CALLBACK:
                return None

    def stored_matrices(self) -> list[FloatArray]:
        match self.kind:
            case CostKind.IDENTITY:
                return [np.eye(self.dim)]
            case CostKind.CONSTANT:
                return [np.array(self.matrix)]
            case CostKind.SCALED:
                return [self.matrix_at(i) for i in range(len(self.scales))]
            case CostKind.CALLBACK:
                return []

    def _check_scales(self, n: int) -> None:
        if len(self.scales) != n:
            raise ConfigurationError(
                f"cost field has {len(self.scales)} per-sample scales, data has {n} points"
            )


def _cholesky(matrix: ArrayLike) -> tuple[FloatArray, bool]:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigurationError(f"cost matrix must be square, got shape {matrix.shape!r}")
    if not np.allclose(matrix, matrix.T, atol=1e-12):
        raise ConfigurationError("cost matrix must be symmetric")
    try:
        return linalg.cho_factor(matrix)
    except linalg.LinAlgError as exc:
        raise ConfigurationError(f"cost matrix is not positive definite: {exc}") from exc


def identity_cost(dim: int) -> CostField:
    return CostField(CostKind.IDENTITY, dim, 1.0, 1.0)


def constant_cost(matrix: ArrayLike) -> CostField:
    matrix = _frozen_array(matrix, 2, "cost matrix")
    _cholesky(matrix)
    eigenvalues = np.linalg.eigvalsh(matrix)
    return CostField(
        CostKind.CONSTANT,
        matrix.shape[0],
        float(eigenvalues[0]),
        float(eigenvalues[-1]),
        matrix=matrix,
    )


def scaled_cost(scales: ArrayLike, dim: int, base: Optional[ArrayLike] = None) -> CostField:
    scales = _frozen_array(scales, 1, "cost scales")
    if np.any(scales <= 0):
        raise ConfigurationError("per-sample cost scales must be positive")
    if base is None:
        low, high, frozen_base = 1.0, 1.0, None
    else:
        frozen_base = _frozen_array(base, 2, "base cost matrix")
        _cholesky(frozen_base)
        eigenvalues = np.linalg.eigvalsh(frozen_base)
        low, high = float(eigenvalues[0]), float(eigenvalues[-1])
    return CostField(
        CostKind.SCALED,
        dim,
        float(np.min(scales)) * low,
        float(np.max(scales)) * high,
        matrix=frozen_base,
        scales=scales,
    )


def implied_vol_cost(volatilities: ArrayLike, dim: int, base: Optional[ArrayLike] = None) -> CostField:
    """A_i = (V̄/V_i)·B: moving returns is cheaper in high-volatility months."""
    vols = np.asarray(volatilities, dtype=np.float64)
    if vols.ndim != 1 or np.any(~np.isfinite(vols)) or np.any(vols <= 0):
        raise ConfigurationError("volatilities must be a finite positive series")
    return scaled_cost(vols.mean() / vols, dim, base)


def callback_cost(
    fn: Callable[[FloatArray], ArrayLike], dim: int, rho_min: float, rho_max: float
) -> CostField:
    return CostField(CostKind.CALLBACK, dim, float(rho_min), float(rho_max), callback=fn)


def quadratic_form(
    cost: CostField, x_index: int, beta: ArrayLike, point: Optional[FloatArray] = None
) -> float:
    """βᵀA(X_i)⁻¹β."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (cost.dim,):
        raise ConfigurationError(f"beta must have dimension {cost.dim}, got shape {beta.shape!r}")
    return float(beta @ cost.solve(beta, x_index, point))


# ------------------------------------------------------------
# Problem and decision
# ------------------------------------------------------------


@dataclass(frozen=True)
class DroProblem:
    data: SampleSet
    cost: CostField
    loss: LossSpec
    delta: float
    r_beta: float
    nondegeneracy: Optional[tuple[float, float, float]] = None
    # decision coordinates held fixed by every step and projection
    pinned: tuple[tuple[int, float], ...] = ()

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise ConfigurationError(f"delta must be positive, got {self.delta!r}")
        if not self.r_beta > 0:
            raise ConfigurationError(f"r_beta must be positive, got {self.r_beta!r}")
        if self.cost.dim != self.data.d:
            raise ConfigurationError(
                f"cost field dimension {self.cost.dim} does not match data dimension {self.data.d}"
            )
        if self.cost.kind is CostKind.SCALED:
            self.cost._check_scales(self.data.n)
        if self.nondegeneracy is not None:
            c1, c2, p = self.nondegeneracy
            if c1 <= 0 or c2 <= 0 or not 0 < p < 1:
                raise ConfigurationError(
                    f"nondegeneracy needs c1, c2 > 0 and p in (0,1), got {self.nondegeneracy!r}"
                )
        pinned = tuple(sorted((int(i), float(v)) for i, v in dict(self.pinned).items()))
        for index, _ in pinned:
            if not 0 <= index < self.data.d:
                raise ConfigurationError(f"pinned coordinate {index} out of range")
        if sum(v * v for _, v in pinned) >= self.r_beta**2:
            raise ConfigurationError("pinned coordinates leave no room inside the decision ball")
        object.__setattr__(self, "pinned", pinned)
        object.__setattr__(self, "loss", self.loss.bind(self.data))

    @property
    def sqrt_delta(self) -> float:
        return float(np.sqrt(self.delta))

    @property
    def free_mask(self) -> NDArray[np.bool_]:
        mask = np.ones(self.data.d, dtype=bool)
        for index, _ in self.pinned:
            mask[index] = False
        return mask

    @property
    def pinned_norm(self) -> float:
        return float(np.sqrt(sum(v * v for _, v in self.pinned)))

    def pin(self, beta: FloatArray) -> FloatArray:
        beta = np.array(beta, dtype=np.float64)
        for index, value in self.pinned:
            beta[index] = value
        return beta

    def with_delta(self, delta: float) -> "DroProblem":
        return replace(self, delta=float(delta))

    def with_labels(self, labels: ArrayLike) -> "DroProblem":
        return replace(self, data=self.data.with_labels(labels))


@dataclass(frozen=True)
class Decision:
    """θ = (β, λ). Unprojected iterates may carry λ < 0; projections return λ ≥ 0."""

    beta: FloatArray
    lam: float

    def __post_init__(self) -> None:
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "lam", float(self.lam))

    @classmethod
    def from_vector(cls, vector: ArrayLike) -> "Decision":
        vector = np.asarray(vector, dtype=np.float64)
        return cls(vector[:-1], vector[-1])

    def as_vector(self) -> FloatArray:
        return np.append(self.beta, self.lam)

    @property
    def beta_norm(self) -> float:
        return float(np.linalg.norm(self.beta))

    def to_json(self) -> dict[str, object]:
        return {"beta": [float(b) for b in self.beta], "lambda": self.lam}
