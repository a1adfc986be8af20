"""Built-in univariate losses ℓ(u; y) for affine decision rules u = βᵀx.

Every callable is numpy-vectorised over both arguments.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import expit

from otdro.core.errors import ConfigurationError
from otdro.core.models import FloatArray, LossComponent, LossSpec, ScalarFn

ACTIVE_TOL = 1e-12


def _f(values: ArrayLike) -> FloatArray:
    return np.asarray(values, dtype=np.float64)


def make_logistic_loss() -> LossSpec:
    def value(u, y):
        return np.logaddexp(0.0, -_f(y) * _f(u))

    def deriv(u, y):
        y = _f(y)
        return -y * expit(-y * _f(u))

    def d2(u, y):
        y = _f(y)
        z = y * _f(u)
        return y * y * expit(z) * expit(-z)

    return LossSpec(
        name="logistic",
        value=value,
        dplus=deriv,
        dminus=deriv,
        d2=d2,
        components=(LossComponent(value, deriv, d2, 0.25),),
        kappa=0.0,
        M=0.25,
        k1=1.0,
        k2=1.0,
    )


def make_squared_loss() -> LossSpec:
    def value(u, y):
        return (_f(y) - _f(u)) ** 2

    def deriv(u, y):
        return 2.0 * (_f(u) - _f(y))

    def d2(u, y):
        return np.full(np.broadcast(_f(u), _f(y)).shape, 2.0)

    return LossSpec(
        name="squared",
        value=value,
        dplus=deriv,
        dminus=deriv,
        d2=d2,
        components=(LossComponent(value, deriv, d2, 2.0),),
        kappa=1.0,
        M=2.0,
        k2=1.0,
        quadratic_center=lambda y: _f(y),
        quadratic_offset=lambda y: np.zeros_like(_f(y)),
        k1_from_labels=True,
    )


def make_mean_variance_loss(zeta: float) -> LossSpec:
    """ℓ(u; μ) = (u − μ)² − ζu, with the label carrying μ."""
    zeta = float(zeta)

    def value(u, mu):
        u = _f(u)
        return (u - _f(mu)) ** 2 - zeta * u

    def deriv(u, mu):
        return 2.0 * (_f(u) - _f(mu)) - zeta

    def d2(u, mu):
        return np.full(np.broadcast(_f(u), _f(mu)).shape, 2.0)

    return LossSpec(
        name="mean_variance",
        value=value,
        dplus=deriv,
        dminus=deriv,
        d2=d2,
        components=(LossComponent(value, deriv, d2, 2.0),),
        kappa=1.0,
        M=2.0,
        k2=1.0,
        quadratic_center=lambda mu: _f(mu) + zeta / 2.0,
        quadratic_offset=lambda mu: -zeta * _f(mu) - zeta * zeta / 4.0,
    )


def max_of_components(name: str, components: Sequence[LossComponent], kappa: float) -> LossSpec:
    """ℓ = max_i ℓ_i; one-sided derivatives are the extreme slopes of the active pieces."""
    components = tuple(components)

    def stacked(u, y):
        return np.stack([np.broadcast_to(c.value(u, y), np.broadcast(_f(u), _f(y)).shape) for c in components])

    def value(u, y):
        return np.max(stacked(u, y), axis=0)

    def one_sided(u, y, pick):
        values = stacked(u, y)
        top = np.max(values, axis=0)
        active = values >= top - ACTIVE_TOL * (1.0 + np.abs(top))
        slopes = np.stack(
            [np.broadcast_to(c.deriv(u, y), top.shape) for c in components]
        )
        fill = -np.inf if pick is np.max else np.inf
        return pick(np.where(active, slopes, fill), axis=0)

    def dplus(u, y):
        return one_sided(u, y, np.max)

    def dminus(u, y):
        return one_sided(u, y, np.min)

    return LossSpec(
        name=name,
        value=value,
        dplus=dplus,
        dminus=dminus,
        d2=None,
        components=components,
        kappa=kappa,
        M=None,
    )


def make_hinge_loss() -> LossSpec:
    def zero(u, y):
        return np.zeros(np.broadcast(_f(u), _f(y)).shape)

    def margin(u, y):
        return 1.0 - _f(y) * _f(u)

    def margin_slope(u, y):
        return np.broadcast_to(-_f(y), np.broadcast(_f(u), _f(y)).shape).astype(np.float64)

    return max_of_components(
        "hinge",
        (LossComponent(zero, zero, zero, 0.0), LossComponent(margin, margin_slope, zero, 0.0)),
        kappa=0.0,
    )


def make_smooth_loss(
    name: str,
    value: ScalarFn,
    deriv: ScalarFn,
    d2: ScalarFn,
    kappa: float,
    M: float,
    k1: Optional[float] = None,
    k2: Optional[float] = None,
) -> LossSpec:
    return LossSpec(
        name=name,
        value=value,
        dplus=deriv,
        dminus=deriv,
        d2=d2,
        components=(LossComponent(value, deriv, d2, float(M)),),
        kappa=float(kappa),
        M=float(M),
        k1=k1,
        k2=k2,
    )


LOSS_FACTORIES = {
    "logistic": make_logistic_loss,
    "squared": make_squared_loss,
    "hinge": make_hinge_loss,
}


def loss_by_name(name: str, zeta: float = 0.0) -> LossSpec:
    if name == "mean_variance":
        return make_mean_variance_loss(zeta)
    try:
        return LOSS_FACTORIES[name]()
    except KeyError:
        raise ConfigurationError(
            f"unknown loss {name!r}; expected one of {sorted([*LOSS_FACTORIES, 'mean_variance'])}"
        ) from None
