import json

import pytest
import yaml
from typer.testing import CliRunner

from otdro.app_start import app
from otdro.core import checks
from otdro.core.checks import OracleCheck
from otdro.core.dro_dataclasses import OracleReport
from otdro.textual_assets.check_app import CheckRunnerApp

runner = CliRunner()

LOGISTIC = {
    "loss": "logistic",
    "delta": 0.01,
    "r_beta": 1.0,
    "iterations": 50,
    "step": {"alpha": 0.5},
    "data": {"synthetic": {"n": 32, "d": 2}},
}


@pytest.fixture
def config_file(tmp_path):
    def write(document=LOGISTIC, name="run.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(document))
        return path

    return write


def test_train_writes_trace_and_summary(config_file, tmp_path):
    path = config_file()
    first, second = tmp_path / "first", tmp_path / "second"
    for out in (first, second):
        result = runner.invoke(app, ["train", "-c", str(path), "-o", str(out)])
        assert result.exit_code == 0, result.output
    assert (first / "summary.json").read_text() == (second / "summary.json").read_text()
    lines = (first / "trace.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["k"] == 50
    summary = json.loads((first / "summary.json").read_text())
    assert summary["method"] == "smooth"
    assert "elapsed_ms" not in summary


def test_invalid_config_exits_with_code_2(config_file, tmp_path):
    path = config_file({**LOGISTIC, "delta": -1.0, "bogus": 3})
    result = runner.invoke(app, ["train", "-c", str(path), "-o", str(tmp_path / "out")])
    assert result.exit_code == 2
    assert "delta" in result.output
    assert "bogus" in result.output


def test_compare_writes_gaps(config_file, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["compare", "-c", str(config_file()), "-o", str(out)])
    assert result.exit_code == 0, result.output
    header = (out / "gaps.csv").read_text().splitlines()[0]
    assert header == "k,arm,objective,gap"
    assert set(json.loads((out / "summary.json").read_text())) == {"dro", "baseline"}


def test_constants_command(config_file, tmp_path):
    out = tmp_path / "out"
    result = runner.invoke(app, ["constants", "-c", str(config_file()), "-o", str(out)])
    assert result.exit_code == 0, result.output
    constants = json.loads((out / "constants.json").read_text())
    assert 0 < constants["K1"] < constants["K2"]
    assert constants["smooth_regime"] is True


def test_constants_need_a_smooth_loss(config_file, tmp_path):
    path = config_file({**LOGISTIC, "loss": "hinge", "step": {"alpha": 0.5, "xi": 1.0}})
    result = runner.invoke(app, ["constants", "-c", str(path), "-o", str(tmp_path / "out")])
    assert result.exit_code == 2


def test_worstcase_writes_both_tables(config_file, tmp_path):
    path = config_file({**LOGISTIC, "beta": [0.5, -0.5], "delta_grid": [0.0, 0.01]})
    out = tmp_path / "out"
    result = runner.invoke(app, ["worstcase", "-c", str(path), "-o", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "worstcase.csv").read_text().startswith("delta,i,regime,x_1,x_2,G,")
    assert (out / "misclassification.csv").read_text().startswith("delta,regime,budget,misclassification")


def test_check_only_writes_report(tmp_path):
    result = runner.invoke(app, ["check", "--only", "single-atom-lambda", "-o", str(tmp_path)])
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "check.json").read_text())
    assert report["passed"] is True
    assert [c["name"] for c in report["checks"]] == ["single-atom-lambda"]


def test_unknown_check_exits_with_code_2(tmp_path):
    result = runner.invoke(app, ["check", "--only", "nope", "-o", str(tmp_path)])
    assert result.exit_code == 2


@pytest.fixture
def broken_check(monkeypatch):
    def raise_singular():
        raise FloatingPointError("singular system")

    broken = OracleCheck("broken", "always raises", raise_singular)
    monkeypatch.setattr(checks, "CHECKS", checks.CHECKS + (broken,))
    return broken


def test_raising_check_fails_the_run(broken_check, tmp_path):
    result = runner.invoke(app, ["check", "--only", "broken", "-o", str(tmp_path)])
    assert result.exit_code == 3
    report = json.loads((tmp_path / "check.json").read_text())
    assert report["passed"] is False
    assert report["checks"][0]["quantity"] == "FloatingPointError"


def _replay_crash(self):
    check = self.checks[0]
    self.reports.append((check.name, OracleReport.crashed(FloatingPointError("singular system"))))


def _close_immediately(self):
    pass


@pytest.mark.parametrize("replay", [_replay_crash, _close_immediately])
def test_tui_check_exits_with_code_3_when_a_check_never_passes(broken_check, monkeypatch, tmp_path, replay):
    monkeypatch.setattr(CheckRunnerApp, "run", replay)
    result = runner.invoke(app, ["check", "--tui", "--only", "broken", "-o", str(tmp_path)])
    assert result.exit_code == 3
    assert json.loads((tmp_path / "check.json").read_text())["passed"] is False


def test_check_takes_no_config(tmp_path):
    result = runner.invoke(app, ["check", "--config", "run.yaml", "-o", str(tmp_path)])
    assert result.exit_code == 2
    assert not (tmp_path / "check.json").exists()


TINY_FRONTIER = {
    "iterations": 50,
    "mu_tol": 0.01,
    "window_months": 24,
    "zeta_grid": [0.5],
    "delta_grid": [0.0, 0.01],
    "workers": 2,
    "data": {"synthetic": {"months": 26, "assets": 2}},
}


@pytest.mark.parametrize(
    "command, document",
    [
        ("train", LOGISTIC),
        ("compare", LOGISTIC),
        ("worstcase", {**LOGISTIC, "beta": [0.5, -0.5], "delta_grid": [0.0, 0.01]}),
        ("frontier", TINY_FRONTIER),
        ("constants", LOGISTIC),
    ],
)
def test_commands_write_identical_bytes_on_rerun(config_file, tmp_path, command, document):
    path = config_file(document)
    outputs = []
    for run in ("first", "second"):
        out = tmp_path / run
        result = runner.invoke(app, [command, "-c", str(path), "-o", str(out)])
        assert result.exit_code == 0, result.output
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outputs[0]
    assert outputs[0] == outputs[1]
