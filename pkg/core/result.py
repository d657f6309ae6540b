"""
Success-or-failure values for work that must not abort a batch.

A sweep keeps going when one grid point fails: the point becomes an error
Result, and later a table row carrying the message instead of metrics.
"""

from collections.abc import Callable
from dataclasses import dataclass
from typing import Generic, TypeVar

T = TypeVar("T")
E = TypeVar("E")
U = TypeVar("U")


@dataclass(frozen=True, slots=True)
class Result(Generic[T, E]):
    """
    Either a value or an error, never both.

    Attributes:
        value: Payload of a successful run.
        error: Failure description; ``None`` means success.
    """

    value: T | None = None
    error: E | None = None

    @classmethod
    def Ok(cls, value: T) -> "Result[T, E]":
        return cls(value=value)

    @classmethod
    def Err(cls, error: E) -> "Result[T, E]":
        return cls(error=error)

    @classmethod
    def capture(cls, func: Callable[[], T]) -> "Result[T, str]":
        """
        Call ``func``; an exception becomes an error of the form ``"Type: message"``.

        KeyboardInterrupt and SystemExit are not ``Exception`` and still propagate.
        """
        try:
            outcome = func()
        except Exception as exc:  # noqa: BLE001
            return Result.Err(f"{type(exc).__name__}: {exc}")
        return Result.Ok(outcome)

    def is_ok(self) -> bool:
        return self.error is None

    def is_error(self) -> bool:
        return not self.is_ok()

    def unwrap(self) -> T:
        """Return the payload; raises ValueError on an error Result."""
        if self.is_error():
            raise ValueError(f"unwrap() on a failed result: {self.error}")
        return self.value  # type: ignore[return-value]

    def unwrap_err(self) -> E:
        """Return the error; raises ValueError on a successful Result."""
        if self.is_ok():
            raise ValueError("unwrap_err() on a successful result")
        return self.error  # type: ignore[return-value]

    def unwrap_or(self, default: T) -> T:
        return default if self.is_error() else self.value  # type: ignore[return-value]

    def map(self, func: Callable[[T], U]) -> "Result[U, E]":
        """Transform the payload of a successful Result; errors pass through."""
        if self.is_error():
            return Result(error=self.error)
        return Result(value=func(self.value))  # type: ignore[arg-type]

    def __repr__(self) -> str:
        return f"Err({self.error!r})" if self.is_error() else f"Ok({self.value!r})"
