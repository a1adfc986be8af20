import numpy as np
import pytest

from otdro.core.checks import single_atom_problem
from otdro.core.datasets import make_classification_sample, make_regression_sample
from otdro.core.losses import make_logistic_loss, make_squared_loss
from otdro.core.models import DroProblem, SampleSet, identity_cost
from otdro.core.regions import build_constants, estimate_L_bounds

LINE_POINTS = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 0.3, -0.3]
LINE_LABELS = [-1.0, -1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0]


@pytest.fixture
def single_atom() -> DroProblem:
    """Squared loss, x = 0, y = 1, A = 1, δ = 1/4."""
    return single_atom_problem()


@pytest.fixture(scope="module")
def logistic_line() -> DroProblem:
    """Eight overlapping logistic points on a line."""
    return DroProblem(
        SampleSet(np.array(LINE_POINTS)[:, None], LINE_LABELS),
        identity_cost(1),
        make_logistic_loss(),
        delta=0.01,
        r_beta=4.0,
    )


@pytest.fixture(scope="module")
def logistic_line_consts(logistic_line):
    return build_constants(logistic_line, estimate_L_bounds(logistic_line))


@pytest.fixture
def logistic_plane() -> DroProblem:
    data = make_classification_sample(64, 2, 1.0, np.random.default_rng(11))
    return DroProblem(data, identity_cost(2), make_logistic_loss(), delta=0.01, r_beta=1.0)


@pytest.fixture
def regression_plane() -> DroProblem:
    data = make_regression_sample(20, 2, 0.3, np.random.default_rng(12))
    return DroProblem(data, identity_cost(2), make_squared_loss(), delta=0.04, r_beta=3.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(2024)
