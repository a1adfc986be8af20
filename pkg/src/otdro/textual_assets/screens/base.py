from __future__ import annotations

import asyncio
import time
from dataclasses import dataclass
from enum import Enum
from typing import Awaitable, Callable, List, Optional

from rich.markup import escape
from rich.text import Text
from textual import on
from textual.containers import Horizontal, Vertical
from textual.screen import Screen
from textual.widgets import Button, Footer, Label, RichLog, Static

from otdro.textual_assets.spinners import SpinnerWidget


class TaskStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"


@dataclass
class TaskSpec:
    description: str
    # returns an exit code; 0 or None means success
    func: Callable[[str], Awaitable[Optional[int]]]


class TaskRow(Horizontal):
    MARKS = {
        TaskStatus.PENDING: ("·", "dim"),
        TaskStatus.RUNNING: ("…", "bold cyan"),
        TaskStatus.SUCCEEDED: ("✓", "green"),
        TaskStatus.FAILED: ("✗", "bold red"),
    }

    def __init__(self, description: str, task_id: str) -> None:
        super().__init__(id=task_id, classes="task-row")
        self.description = description
        self.status = TaskStatus.PENDING
        self.elapsed: float | None = None

    def compose(self):
        spinner = SpinnerWidget("line", id=f"{self.id}-spinner", classes="task-spinner")
        spinner.display = False
        yield spinner
        yield Label(self._status_text(), id=f"{self.id}-label", classes="task-label")

    def _status_text(self, detail: str | None = None) -> Text:
        mark, style = self.MARKS[self.status]
        text = Text(f"{mark} {self.description}", style=style)
        if self.elapsed is not None:
            text.append(f"  {self.elapsed:.2f}s", style="dim")
        if detail:
            text.append(f"  {detail}", style="red")
        return text

    def set_status(self, status: TaskStatus, detail: str | None = None) -> None:
        self.status = status
        spinner = self.query_one(f"#{self.id}-spinner", SpinnerWidget)
        if status == TaskStatus.RUNNING:
            spinner.start()
        else:
            spinner.stop()
        self.query_one(f"#{self.id}-label", Label).update(self._status_text(detail))


class SequentialTasksScreenTemplate(Screen):
    """Runs its tasks in order and streams their log lines.

    A failed task is counted and the next one starts; ``done`` is set after the last.
    """

    BINDINGS = [("q", "close", "Close"), ("ctrl+c", "app.quit", "Quit")]

    CSS = """
    SequentialTasksScreenTemplate { background: $surface; }
    #runner { height: 1fr; padding: 1 2; }
    #runner-title { text-style: bold; padding-bottom: 1; }
    #runner-subtitle { color: $text-muted; padding-bottom: 1; }
    .task-row { height: 1; }
    .task-spinner { width: 2; }
    #task-log { height: 1fr; border: round $primary; margin-top: 1; }
    #runner-summary { height: 1; margin-top: 1; }
    #close-btn { margin-top: 1; }
    """

    TITLE = "Task Runner"
    SUBTITLE = "Tasks run one at a time."

    def __init__(self, tasks: List[TaskSpec] | None = None) -> None:
        super().__init__()
        self.tasks = tasks or []
        self.task_rows: List[TaskRow] = []
        self.failures = 0
        self.done = asyncio.Event()

    def compose(self):
        self.task_rows = [TaskRow(task.description, f"task-{i}") for i, task in enumerate(self.tasks)]
        close = Button("Close", id="close-btn", disabled=True)
        yield Vertical(
            Static(self.TITLE, id="runner-title"),
            Static(self.SUBTITLE, id="runner-subtitle"),
            *self.task_rows,
            RichLog(id="task-log", max_lines=1000, markup=True, wrap=True),
            Static("", id="runner-summary"),
            close,
            id="runner",
        )
        yield Footer()

    def on_mount(self) -> None:
        self.run_worker(self.run_tasks(), exclusive=True)

    def log_line(self, task: str | None, msg: str) -> None:
        self.query_one("#task-log", RichLog).write(f"[bold]{task}[/] {msg}" if task else msg)

    async def run_single_task(self, row: TaskRow, task: TaskSpec) -> int:
        row.set_status(TaskStatus.RUNNING)
        started = time.perf_counter()
        try:
            result = await task.func(task.description)
            code = result if isinstance(result, int) else 0
        except Exception as e:
            self.log_line(task.description, f"[red]{escape(repr(e))}[/]")
            code = 1
        row.elapsed = time.perf_counter() - started
        if code == 0:
            row.set_status(TaskStatus.SUCCEEDED)
        else:
            row.set_status(TaskStatus.FAILED, f"exit {code}")
        return code

    async def run_tasks(self) -> None:
        for row, task in zip(self.task_rows, self.tasks):
            if await self.run_single_task(row, task) != 0:
                self.failures += 1
        passed = len(self.tasks) - self.failures
        summary = f"{passed}/{len(self.tasks)} passed"
        self.query_one("#runner-summary", Static).update(
            Text(summary, style="bold red" if self.failures else "bold green")
        )
        self.query_one("#close-btn", Button).disabled = False
        self.done.set()

    def action_close(self) -> None:
        if self.done.is_set():
            self.app.exit()

    @on(Button.Pressed, "#close-btn")
    def on_close_pressed(self, event: Button.Pressed) -> None:
        self.app.exit()
