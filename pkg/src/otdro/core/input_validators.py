from pathlib import Path
from typing import Iterable

from textual.validation import ValidationResult, Validator


def _as_float(value) -> float | None:
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


class PositiveNumber(Validator):
    def validate(self, value: str) -> ValidationResult:
        number = _as_float(value)
        if number is None:
            return self.failure(f"{value!r} is not a number")
        if not number > 0:
            return self.failure(f"{value!r} must be positive")
        return self.success()


class NonNegativeNumber(Validator):
    def validate(self, value: str) -> ValidationResult:
        number = _as_float(value)
        if number is None:
            return self.failure(f"{value!r} is not a number")
        if number < 0:
            return self.failure(f"{value!r} must be nonnegative")
        return self.success()


class PositiveInteger(Validator):
    def validate(self, value: str) -> ValidationResult:
        try:
            number = int(str(value))
        except ValueError:
            return self.failure(f"{value!r} is not an integer")
        if number < 1:
            return self.failure(f"{value!r} must be at least 1")
        return self.success()


class DecayExponent(Validator):
    """τ of the step rule α·k^(−τ)."""

    def validate(self, value: str) -> ValidationResult:
        number = _as_float(value)
        if number is None:
            return self.failure(f"{value!r} is not a number")
        if not 0.5 <= number <= 1.0:
            return self.failure(f"{value!r} must lie in [0.5, 1]")
        return self.success()


class StepSize(PositiveNumber):
    """A positive step size, or ``auto``."""

    def validate(self, value: str) -> ValidationResult:
        if str(value) == "auto":
            return self.success()
        return super().validate(value)


class OneOf(Validator):
    def __init__(self, choices: Iterable[str], failure_description: str | None = None):
        super().__init__(failure_description=failure_description)
        self.choices = tuple(choices)

    def validate(self, value: str) -> ValidationResult:
        if value in self.choices:
            return self.success()
        return self.failure(f"{value!r} is not one of {', '.join(self.choices)}")


class ExistingFile(Validator):
    def validate(self, value: str) -> ValidationResult:
        if value in ("", "None"):
            return self.success()
        if not Path(value).is_file():
            return self.failure(f"no such file: {value!r}")
        return self.success()
