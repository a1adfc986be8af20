import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from otdro.core.errors import ConfigurationError, DataError
from otdro.core.portfolio import (
    PortfolioSettings,
    budget_rotation,
    frontier_frame,
    read_return_series,
    run_portfolio_frontier,
    solve_portfolio_weights,
)


def monthly(values, columns=None) -> pd.DataFrame:
    index = pd.Index([str(p) for p in pd.period_range("2010-01", periods=len(values), freq="M")], name="month")
    return pd.DataFrame(values, index=index, columns=columns)


@pytest.fixture
def small_history():
    rng = np.random.default_rng(7)
    returns = monthly(0.01 + 0.05 * rng.standard_normal((27, 3)), ["a", "b", "c"])
    vols = monthly(np.full(27, 0.25), ["vol"])
    return returns, vols


def test_budget_rotation_is_orthogonal():
    Q = budget_rotation(4)
    assert_allclose(Q.T @ Q, np.eye(4), atol=1e-12)
    assert_allclose(Q[:, 0], 0.5)
    with pytest.raises(ConfigurationError, match="two assets"):
        budget_rotation(1)


def test_non_robust_zero_zeta_is_minimum_variance():
    rng = np.random.default_rng(7)
    returns = 0.01 + 0.05 * rng.standard_normal((24, 3))
    settings = PortfolioSettings(r_beta=5.0, iterations=3000, mu_tol=1e-7)
    solve = solve_portfolio_weights(returns, 0.0, 0.0, settings=settings)

    inverse = np.linalg.inv(np.cov(returns, rowvar=False, ddof=0))
    expected = inverse @ np.ones(3) / (np.ones(3) @ inverse @ np.ones(3))
    assert solve.method == "baseline"
    assert abs(solve.weights.sum() - 1.0) <= 1e-10
    assert_allclose(solve.weights, expected, atol=1e-3)
    assert solve.mu == pytest.approx(float(np.mean(returns @ solve.weights)), abs=1e-6)


def test_robust_weights_keep_the_budget():
    rng = np.random.default_rng(8)
    returns = 0.01 + 0.05 * rng.standard_normal((24, 3))
    solve = solve_portfolio_weights(returns, 0.5, 0.01, settings=PortfolioSettings(iterations=200, mu_tol=1e-3))
    assert solve.method in ("smooth", "nonsmooth")
    assert abs(solve.weights.sum() - 1.0) <= 1e-10
    assert np.isfinite(solve.value)


def test_constant_volatility_matches_constant_cost(small_history):
    returns, vols = small_history
    settings = PortfolioSettings(iterations=100, mu_tol=1e-3)
    points = run_portfolio_frontier(
        returns, vols, 24, [0.5], [0.0, 0.01], ("constant", "implied-vol-scaled"), settings, workers=2
    )
    frame = frontier_frame(points)
    assert list(frame.columns) == ["zeta", "delta", "cost_kind", "mean_return", "std_return"]
    assert len(frame) == 4
    by_kind = {kind: part.reset_index(drop=True) for kind, part in frame.groupby("cost_kind")}
    assert_allclose(
        by_kind["constant"][["mean_return", "std_return"]].to_numpy(),
        by_kind["implied-vol-scaled"][["mean_return", "std_return"]].to_numpy(),
        rtol=1e-6,
    )


def test_frontier_is_ordered_and_reproducible(small_history):
    returns, _ = small_history
    settings = PortfolioSettings(iterations=50, mu_tol=1e-2)
    first = run_portfolio_frontier(returns, None, 24, [1.0, 0.0], [0.0], settings=settings, workers=2)
    second = run_portfolio_frontier(returns, None, 24, [1.0, 0.0], [0.0], settings=settings, workers=1)
    assert [p.zeta for p in first] == [0.0, 1.0]
    assert first == second


@pytest.mark.parametrize(
    "window, message",
    [(12, "at least 24"), (27, "no month")],
)
def test_frontier_window_limits(small_history, window, message):
    returns, _ = small_history
    with pytest.raises(ConfigurationError, match=message):
        run_portfolio_frontier(returns, None, window, [0.0], [0.0])


def test_implied_vol_cost_needs_volatility(small_history):
    returns, _ = small_history
    with pytest.raises(ConfigurationError, match="volatility series"):
        run_portfolio_frontier(returns, None, 24, [0.0], [0.0], "implied-vol-scaled")


def test_negative_delta_is_rejected(small_history):
    returns, _ = small_history
    with pytest.raises(ConfigurationError, match="nonnegative"):
        run_portfolio_frontier(returns, None, 24, [0.0], [-0.1])


def test_bad_returns_are_located(small_history):
    returns, vols = small_history
    broken = returns.copy()
    broken.iloc[4, 1] = np.nan
    with pytest.raises(DataError, match=r"row 6, column 'b'"):
        read_return_series(broken, vols)


def test_misaligned_volatility(small_history):
    returns, vols = small_history
    with pytest.raises(ConfigurationError, match="misaligned"):
        read_return_series(returns, vols.iloc[1:])


def test_volatility_must_be_positive(small_history):
    returns, vols = small_history
    with pytest.raises(DataError, match="positive"):
        read_return_series(returns, -vols)


def test_return_series_from_csv(tmp_path, small_history):
    returns, vols = small_history
    returns.to_csv(tmp_path / "returns.csv")
    vols.to_csv(tmp_path / "vols.csv")
    loaded, series = read_return_series(tmp_path / "returns.csv", tmp_path / "vols.csv")
    assert_allclose(loaded.to_numpy(), returns.to_numpy())
    assert (series == 0.25).all()
