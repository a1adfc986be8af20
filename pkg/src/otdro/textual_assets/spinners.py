from rich.spinner import Spinner
from textual.widgets import Static


class SpinnerWidget(Static):
    """Rich spinner that only animates while ``spinning`` is set."""

    def __init__(self, spinner_name: str = "dots", *args, fps: int = 20, **kwargs) -> None:
        super().__init__("", *args, **kwargs)
        self._spinner = Spinner(spinner_name)
        self._fps = fps
        self.spinning = False

    def on_mount(self) -> None:
        self.set_interval(1 / self._fps, self.update_spinner)

    def start(self) -> None:
        self.spinning = True
        self.display = True

    def stop(self) -> None:
        self.spinning = False
        self.display = False

    def update_spinner(self) -> None:
        if self.spinning:
            self.update(self._spinner)
