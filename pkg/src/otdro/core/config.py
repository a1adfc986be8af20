"""Run configuration: one YAML or JSON document, flat dotted keys or nested mappings."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

import yaml
from textual.validation import Validator

from otdro.core.errors import ConfigurationError
from otdro.core.input_validators import (
    DecayExponent,
    ExistingFile,
    NonNegativeNumber,
    OneOf,
    PositiveInteger,
    PositiveNumber,
    StepSize,
)
from otdro.core.losses import LOSS_FACTORIES

logger = logging.getLogger(__name__)

METHODS = ("smooth", "nonsmooth", "two_timescale", "line_search")
COST_KINDS = ("identity", "constant", "implied_vol")
FRONTIER_COSTS = ("constant", "implied-vol-scaled")


@dataclass(frozen=True)
class RunConfig:
    delta: float = 0.1
    r_beta: float = 1.0
    loss: str = "logistic"
    cost: str = "identity"
    cost_matrix: Optional[tuple[tuple[float, ...], ...]] = None
    cost_volatility_path: Optional[str] = None
    step_alpha: float | str = 0.5
    step_tau: float = 0.55
    step_xi: float = 0.0
    lambda_step_alpha: float = 1.0
    lambda_step_tau: float = 0.52
    eta: float = 0.01
    seed: int = 0
    method: Optional[str] = None
    iterations: int = 10_000
    inner_iterations: int = 500
    batch_size: int = 1
    zeta: float = 0.0
    zeta_grid: tuple[float, ...] = (0.0, 0.5, 1.0)
    delta_grid: tuple[float, ...] = (0.01, 0.04, 0.09, 0.16, 0.25)
    window_months: int = 24
    workers: Optional[int] = None
    lambda_tol: float = 1e-3
    mu_tol: float = 1e-6
    data_path: Optional[str] = None
    data_features: Optional[tuple[str, ...]] = None
    data_label: Optional[str] = None
    synthetic_n: int = 256
    synthetic_d: int = 2
    synthetic_separation: float = 2.0
    synthetic_noise: float = 0.1
    synthetic_months: int = 60
    synthetic_assets: int = 3
    returns_path: Optional[str] = None
    L_bounds: Optional[tuple[float, float]] = None
    nondegeneracy: Optional[tuple[float, float, float]] = None
    record_timing: bool = False
    beta: Optional[tuple[float, ...]] = None
    cost_kinds: tuple[str, ...] = FRONTIER_COSTS

    @property
    def resolved_method(self) -> str:
        """Explicit ``method``, else nonsmooth for hinge and smooth otherwise."""
        if self.method is not None:
            return self.method
        return "nonsmooth" if self.loss == "hinge" else "smooth"

    def to_json(self) -> dict[str, Any]:
        return {key: getattr(self, name) for key, (name, _, _) in KEYS.items()}


# ------------------------------------------------------------
# Key table: dotted key -> (field, validator, parser)
# ------------------------------------------------------------


def _float(value) -> float:
    return float(value)


def _int(value) -> int:
    return int(value)


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).lower() in ("1", "true", "yes", "on")


def _alpha(value) -> float | str:
    return "auto" if str(value) == "auto" else float(value)


def _floats(value) -> tuple[float, ...]:
    return tuple(float(v) for v in _as_list(value))


def _strings(value) -> tuple[str, ...]:
    return tuple(str(v) for v in _as_list(value))


def _matrix(value) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(float(v) for v in row) for row in value)


def _text(value) -> str:
    return str(value)


def _as_list(value) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


KEYS: dict[str, tuple[str, Optional[Validator], Callable[[Any], Any]]] = {
    "delta": ("delta", PositiveNumber(), _float),
    "r_beta": ("r_beta", PositiveNumber(), _float),
    "loss": ("loss", OneOf((*LOSS_FACTORIES, "mean_variance")), _text),
    "cost": ("cost", OneOf(COST_KINDS), _text),
    "cost.matrix": ("cost_matrix", None, _matrix),
    "cost.volatility_path": ("cost_volatility_path", ExistingFile(), _text),
    "step.alpha": ("step_alpha", StepSize(), _alpha),
    "step.tau": ("step_tau", DecayExponent(), _float),
    "step.xi": ("step_xi", NonNegativeNumber(), _float),
    "lambda_step.alpha": ("lambda_step_alpha", PositiveNumber(), _float),
    "lambda_step.tau": ("lambda_step_tau", DecayExponent(), _float),
    "eta": ("eta", PositiveNumber(), _float),
    "seed": ("seed", NonNegativeNumber(), _int),
    "method": ("method", OneOf(METHODS), _text),
    "iterations": ("iterations", PositiveInteger(), _int),
    "inner_iterations": ("inner_iterations", PositiveInteger(), _int),
    "batch_size": ("batch_size", PositiveInteger(), _int),
    "zeta": ("zeta", NonNegativeNumber(), _float),
    "zeta_grid": ("zeta_grid", NonNegativeNumber(), _floats),
    "delta_grid": ("delta_grid", NonNegativeNumber(), _floats),
    "window_months": ("window_months", PositiveInteger(), _int),
    "workers": ("workers", PositiveInteger(), _int),
    "lambda_tol": ("lambda_tol", PositiveNumber(), _float),
    "mu_tol": ("mu_tol", PositiveNumber(), _float),
    "data.path": ("data_path", ExistingFile(), _text),
    "data.features": ("data_features", None, _strings),
    "data.label": ("data_label", None, _text),
    "data.synthetic.n": ("synthetic_n", PositiveInteger(), _int),
    "data.synthetic.d": ("synthetic_d", PositiveInteger(), _int),
    "data.synthetic.separation": ("synthetic_separation", NonNegativeNumber(), _float),
    "data.synthetic.noise": ("synthetic_noise", NonNegativeNumber(), _float),
    "data.synthetic.months": ("synthetic_months", PositiveInteger(), _int),
    "data.synthetic.assets": ("synthetic_assets", PositiveInteger(), _int),
    "returns_path": ("returns_path", ExistingFile(), _text),
    "L_bounds": ("L_bounds", PositiveNumber(), _floats),
    "nondegeneracy": ("nondegeneracy", PositiveNumber(), _floats),
    "record_timing": ("record_timing", None, _bool),
    "beta": ("beta", None, _floats),
    "cost_kinds": ("cost_kinds", OneOf(FRONTIER_COSTS), _strings),
}

# subtrees whose values are data, not further keys
_LEAF_KEYS = {"cost.matrix", "data.features", "zeta_grid", "delta_grid", "L_bounds", "nondegeneracy", "beta", "cost_kinds"}


# ------------------------------------------------------------
# Reading and writing keys
# ------------------------------------------------------------


def flatten_config(document: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in document.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping) and dotted not in _LEAF_KEYS:
            if dotted == "cost" and "kind" in value:
                flat["cost"] = value["kind"]
                value = {k: v for k, v in value.items() if k != "kind"}
            flat.update(flatten_config(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def get_config_value(config: Mapping[str, Any], key: str) -> Any:
    """Value at a dotted key, written flat or nested; None when absent."""
    if key in config:
        return config[key]
    head, _, rest = key.partition(".")
    node = config.get(head)
    if rest and isinstance(node, Mapping):
        return get_config_value(node, rest)
    return None


def set_config_value(config: dict[str, Any], key: str, value: Any) -> dict[str, Any]:
    """Write ``value`` at a dotted key as nested mappings."""
    head, _, rest = key.partition(".")
    if not rest:
        config[head] = value
        return config
    node = config.get(head)
    if not isinstance(node, dict):
        node = {} if node is None else {"kind": node}
        config[head] = node
    set_config_value(node, rest, value)
    return config


def read_config_document(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"no such config file: {str(path)!r}")
    try:
        with open(path) as f:
            document = yaml.safe_load(f) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {str(path)!r}: {exc}") from None
    if not isinstance(document, dict):
        raise ConfigurationError(f"{str(path)!r} must hold a mapping, got {type(document).__name__}")
    return document


def write_config_document(path: str | Path, document: Mapping[str, Any]) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(dict(document), f, sort_keys=False)


# ------------------------------------------------------------
# Validation
# ------------------------------------------------------------


def _failures(key: str, value: Any, validator: Optional[Validator]) -> list[str]:
    if validator is None or value is None:
        return []
    items = _as_list(value) if key in _LEAF_KEYS else [value]
    messages = []
    for item in items:
        result = validator.validate(str(item))
        if not result.is_valid:
            messages.extend(f"{key}: {m}" for m in result.failure_descriptions)
    return messages


def _cross_checks(config: RunConfig) -> list[str]:
    messages = []
    if config.L_bounds is not None and (len(config.L_bounds) != 2 or config.L_bounds[0] > config.L_bounds[1]):
        messages.append(f"L_bounds: need [lower, upper] with lower <= upper, got {list(config.L_bounds)!r}")
    if config.nondegeneracy is not None:
        if len(config.nondegeneracy) != 3 or not 0 < config.nondegeneracy[2] < 1:
            messages.append(f"nondegeneracy: need [c1, c2, p] with p in (0,1), got {list(config.nondegeneracy)!r}")
    if config.cost == "constant" and config.cost_matrix is None:
        messages.append("cost.matrix: required when cost is 'constant'")
    if config.data_path is not None and config.data_label is None and config.loss != "mean_variance":
        messages.append("data.label: required when data.path is given")
    if config.resolved_method == "two_timescale" and config.step_tau <= config.lambda_step_tau:
        messages.append(
            f"lambda_step.tau: must be below step.tau={config.step_tau!r}, got {config.lambda_step_tau!r}"
        )
    if config.resolved_method == "nonsmooth" and config.step_xi < 1:
        messages.append(f"step.xi: nonsmooth runs need xi >= 1, got {config.step_xi!r}")
    return messages


def load_run_config(
    path: str | Path | None = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Read, validate and freeze a run configuration.

    Every failure is collected and raised together as one ConfigurationError.
    """
    flat = flatten_config(read_config_document(path)) if path is not None else {}
    flat.update(flatten_config(overrides or {}))

    messages: list[str] = []
    values: dict[str, Any] = {}
    for key, value in flat.items():
        if key not in KEYS:
            messages.append(f"{key}: unknown configuration key")
            continue
        name, validator, parse = KEYS[key]
        failures = _failures(key, value, validator)
        if failures:
            messages.extend(failures)
            continue
        try:
            values[name] = None if value is None else parse(value)
        except (TypeError, ValueError) as exc:
            messages.append(f"{key}: cannot read {value!r} ({exc})")
    if messages:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(messages))

    config = replace(RunConfig(), **values)
    messages = _cross_checks(config)
    if messages:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(messages))
    logger.debug("loaded configuration from %s with %d key(s)", path, len(values))
    return config


def config_field_names() -> tuple[str, ...]:
    return tuple(f.name for f in fields(RunConfig))
