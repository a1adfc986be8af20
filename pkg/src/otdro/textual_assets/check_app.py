from __future__ import annotations

import asyncio
from typing import Sequence

from textual.app import App

from otdro.core.checks import OracleCheck
from otdro.core.dro_dataclasses import OracleReport
from otdro.textual_assets.screens.base import SequentialTasksScreenTemplate, TaskSpec


class CheckTasksScreen(SequentialTasksScreenTemplate):
    TITLE = "ot-dro oracle checks"
    SUBTITLE = "Each check compares a fast path against an independent reference."


class CheckRunnerApp(App):
    """Runs the oracle suite in the sequential task runner and keeps the reports."""

    def __init__(self, checks: Sequence[OracleCheck], **kwargs):
        super().__init__(**kwargs)
        self.checks = tuple(checks)
        self.reports: list[tuple[str, OracleReport]] = []

    def get_default_screen(self) -> CheckTasksScreen:
        return CheckTasksScreen([self._check_task(check) for check in self.checks])

    def _check_task(self, check: OracleCheck) -> TaskSpec:
        async def run(label: str) -> int:
            screen = self.screen
            screen.log_line(label, check.description)
            try:
                report = await asyncio.to_thread(check.run)
            except Exception as exc:
                self.reports.append((check.name, OracleReport.crashed(exc)))
                raise
            self.reports.append((check.name, report))
            screen.log_line(
                label,
                f"oracle={report.oracle_value:.10g} fast={report.fast_value:.10g} "
                f"error={report.abs_error:.3g} (tolerance {report.tolerance:.3g})",
            )
            return 0 if report.passed else 3

        return TaskSpec(check.name, run)
