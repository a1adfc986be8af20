import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Any, Optional

import numpy as np
import textual
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from rich.traceback import install

from otdro.core.checks import run_checks, select_checks
from otdro.core.config import RunConfig, load_run_config
from otdro.core.datasets import make_return_series
from otdro.core.errors import ConfigurationError, OtDroError
from otdro.core.experiments import (
    CSV_FLOAT_FORMAT,
    constants_from_config,
    gap_frame,
    problem_from_config,
    run_supervised_experiment,
    run_training,
    run_worstcase_trace,
)
from otdro.core.portfolio import PortfolioSettings, frontier_frame, run_portfolio_frontier

install(
    show_locals=False,
    suppress=[typer, textual],
)

console = Console(stderr=True)

app = typer.Typer(
    name="ot-dro",
    help="Optimal-transport DRO solvers: training, experiments and oracle checks.",
    no_args_is_help=True,
    add_completion=False,
)

ConfigOption = Annotated[
    Optional[Path], typer.Option("--config", "-c", help="JSON or YAML run configuration.")
]
OutOption = Annotated[Path, typer.Option("--out", "-o", help="Directory for output files.")]


@app.callback()
def main(
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Log progress.")] = False,
    debug: Annotated[bool, typer.Option("--debug", help="Log everything.")] = False,
) -> None:
    level = logging.DEBUG if debug else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=debug)],
        force=True,
    )


@contextmanager
def _reported_errors():
    try:
        yield
    except OtDroError as exc:
        console.print(f"[bold red]{type(exc).__name__}:[/] {exc}")
        raise typer.Exit(code=exc.exit_code)


def _prepare(config_path: Optional[Path], out: Path) -> RunConfig:
    config = load_run_config(config_path)
    out.mkdir(parents=True, exist_ok=True)
    return config


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


@app.command()
def train(config_path: ConfigOption = None, out: OutOption = Path(".")) -> None:
    """Run the optimizer chosen by ``method`` and write trace.jsonl and summary.json."""
    with _reported_errors():
        config = _prepare(config_path, out)
        result = run_training(config)
        if result.trace is not None:
            lines = [json.dumps(r.to_json(config.record_timing)) for r in result.trace.records]
            (out / "trace.jsonl").write_text("\n".join(lines) + "\n")
        _write_json(out / "summary.json", result.summary(config.record_timing))
        console.print(f"[green]train[/] ({result.method}) wrote {out}")


@app.command()
def compare(config_path: ConfigOption = None, out: OutOption = Path(".")) -> None:
    """DRO vs non-DRO runs on the same sample stream; writes gaps.csv and summary.json."""
    with _reported_errors():
        config = _prepare(config_path, out)
        pair = run_supervised_experiment(config)
        gap_frame(pair).to_csv(out / "gaps.csv", index=False, float_format=CSV_FLOAT_FORMAT)
        _write_json(
            out / "summary.json",
            {
                "dro": pair.dro.summary(config.record_timing),
                "baseline": pair.baseline.summary(config.record_timing),
            },
        )
        console.print(f"[green]compare[/] wrote {out}")


@app.command()
def worstcase(config_path: ConfigOption = None, out: OutOption = Path(".")) -> None:
    """Worst-case transports along ``delta_grid``; writes worstcase.csv and misclassification.csv."""
    with _reported_errors():
        config = _prepare(config_path, out)
        trace = run_worstcase_trace(config)
        trace.transports.to_csv(out / "worstcase.csv", index=False, float_format=CSV_FLOAT_FORMAT)
        trace.rates.to_csv(out / "misclassification.csv", index=False, float_format=CSV_FLOAT_FORMAT)
        console.print(f"[green]worstcase[/] wrote {out}")


@app.command()
def frontier(config_path: ConfigOption = None, out: OutOption = Path(".")) -> None:
    """Rolling-window portfolio backtest; writes frontier.csv."""
    with _reported_errors():
        config = _prepare(config_path, out)
        if config.returns_path is None:
            rng = np.random.default_rng(config.seed)
            returns, vols = make_return_series(config.synthetic_months, config.synthetic_assets, rng)
        else:
            returns, vols = config.returns_path, config.cost_volatility_path
        settings = PortfolioSettings(
            r_beta=config.r_beta,
            iterations=config.iterations,
            tau=config.step_tau,
            alpha=config.step_alpha,
            eta=config.eta,
            mu_tol=config.mu_tol,
            seed=config.seed,
        )
        points = run_portfolio_frontier(
            returns,
            vols,
            config.window_months,
            config.zeta_grid,
            config.delta_grid,
            config.cost_kinds,
            settings,
            config.workers,
        )
        frontier_frame(points).to_csv(out / "frontier.csv", index=False, float_format=CSV_FLOAT_FORMAT)
        console.print(f"[green]frontier[/] wrote {len(points)} point(s) to {out}")


@app.command()
def constants(config_path: ConfigOption = None, out: OutOption = Path(".")) -> None:
    """L bounds, K₁, K₂ and the δ thresholds; writes constants.json."""
    with _reported_errors():
        config = _prepare(config_path, out)
        problem = problem_from_config(config)
        consts = constants_from_config(config, problem)
        if consts is None:
            raise ConfigurationError(f"loss {config.loss!r} has no smooth constants")
        _write_json(out / "constants.json", consts.to_json())
        console.print(f"[green]constants[/] wrote {out / 'constants.json'}")


@app.command()
def check(
    out: OutOption = Path("."),
    only: Annotated[
        Optional[list[str]], typer.Option("--only", help="Run only the named check(s).")
    ] = None,
    tui: Annotated[bool, typer.Option("--tui", help="Run inside the terminal task runner.")] = False,
) -> None:
    """Oracle suite; writes check.json and exits 3 when any check fails."""
    with _reported_errors():
        out.mkdir(parents=True, exist_ok=True)
        selected = select_checks(only)
        if tui:
            from otdro.textual_assets.check_app import CheckRunnerApp

            runner = CheckRunnerApp(selected)
            runner.run()
            reports = runner.reports
        else:
            reports = run_checks(only)

        table = Table(title="oracle checks")
        for column in ("check", "oracle", "fast", "error", "tolerance", "result"):
            table.add_column(column)
        for name, report in reports:
            table.add_row(
                name,
                f"{report.oracle_value:.10g}",
                f"{report.fast_value:.10g}",
                f"{report.abs_error:.3g}",
                f"{report.tolerance:.3g}",
                "[green]pass[/]" if report.passed else "[red]FAIL[/]",
            )
        console.print(table)
        # checks that never reported, e.g. after closing the runner early, count as failures
        passed = len(reports) == len(selected) and all(report.passed for _, report in reports)
        _write_json(
            out / "check.json",
            {"passed": passed, "checks": [{"name": name, **report.to_json()} for name, report in reports]},
        )
        if not passed:
            raise typer.Exit(code=3)


def run_app():
    app()


if __name__ == "__main__":
    run_app()
