import asyncio
import math

import pytest

from otdro.core import checks
from otdro.core.checks import CHECKS, OracleCheck, run_checks, select_checks
from otdro.core.dro_dataclasses import OracleReport
from otdro.core.errors import ConfigurationError
from otdro.textual_assets.check_app import CheckRunnerApp

FAST = ["single-atom-lambda", "single-atom-value", "single-atom-transport", "duality-gap"]


def test_check_names_are_unique():
    names = [check.name for check in CHECKS]
    assert len(names) == len(set(names))


def test_select_checks_keeps_requested_order():
    assert [c.name for c in select_checks(["duality-gap", "single-atom-lambda"])] == [
        "duality-gap",
        "single-atom-lambda",
    ]
    assert select_checks(None) == CHECKS
    with pytest.raises(ConfigurationError, match="unknown check"):
        select_checks(["no-such-check"])


def test_single_atom_checks_pass():
    for name, report in run_checks(FAST):
        assert report.passed, (name, report.to_json())


@pytest.mark.slow
def test_full_suite_passes():
    failures = [(name, report.to_json()) for name, report in run_checks() if not report.passed]
    assert failures == []


def test_tui_runner_collects_reports():
    async def drive():
        app = CheckRunnerApp(select_checks(FAST[:2]))
        async with app.run_test():
            await asyncio.wait_for(app.screen.done.wait(), 60)
            assert app.screen.failures == 0
            assert [row.status.value for row in app.screen.task_rows] == ["succeeded", "succeeded"]
        return app.reports

    reports = asyncio.run(drive())
    assert [name for name, _ in reports] == FAST[:2]
    assert all(report.passed for _, report in reports)


def _raise_singular():
    raise FloatingPointError("singular system")


BROKEN = OracleCheck("broken", "always raises", _raise_singular)


@pytest.fixture
def with_broken_check(monkeypatch):
    monkeypatch.setattr(checks, "CHECKS", CHECKS + (BROKEN,))
    return BROKEN


def test_raising_check_is_reported_as_failed(with_broken_check):
    reports = run_checks(["single-atom-lambda", "broken"])
    assert [name for name, _ in reports] == ["single-atom-lambda", "broken"]
    report = reports[1][1]
    assert not report.passed
    assert report.quantity == "FloatingPointError"
    assert report.to_json()["abs_error"] is None
    assert report.parameters == {"error": "singular system"}


def test_tui_runner_counts_raising_check(with_broken_check):
    async def drive():
        app = CheckRunnerApp(select_checks(["broken", "single-atom-lambda"]))
        async with app.run_test():
            await asyncio.wait_for(app.screen.done.wait(), 60)
            assert app.screen.failures == 1
            assert [row.status.value for row in app.screen.task_rows] == ["failed", "succeeded"]
        return app.reports

    reports = asyncio.run(drive())
    assert [name for name, _ in reports] == ["broken", "single-atom-lambda"]
    assert [report.passed for _, report in reports] == [False, True]


def test_report_bounds():
    assert OracleReport.at_most("slope", -0.4, -0.5).passed
    assert not OracleReport.at_most("slope", -0.4, -0.3).passed
    assert OracleReport.at_most("gap", 1.0, 1.05, tolerance=0.1).passed
    assert OracleReport.above("curvature", 0.0, 1e-3).passed
    assert not OracleReport.above("curvature", 0.0, 0.0).passed
    assert not OracleReport.above("curvature", 0.0, 1e-3, tolerance=1e-2).passed
    assert OracleReport.at_most("slope", -0.4, -0.5).to_json()["bound"] == "at_most"
    crashed = OracleReport.crashed(ValueError("x"))
    assert math.isnan(crashed.fast_value) and not crashed.passed


@pytest.mark.parametrize("name", ["projection-U-eta", "hessian-witness", "hessian-flat-baseline"])
def test_structural_checks_pass(name):
    [(_, report)] = run_checks([name])
    assert report.passed, report.to_json()


@pytest.mark.slow
@pytest.mark.parametrize("name", ["nonsmooth-rate", "nonsmooth-envelope"])
def test_nonsmooth_checks_pass(name):
    [(_, report)] = run_checks([name])
    assert report.passed, report.to_json()
    assert report.bound == "at_most"
