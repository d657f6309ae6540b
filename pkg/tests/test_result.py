"""Tests for the Result container."""

import pytest

from core.result import Result


class TestResult:
    """Test cases for Result."""

    def test_ok(self) -> None:
        result: Result[int, str] = Result.Ok(3)
        assert result.is_ok()
        assert not result.is_error()
        assert result.unwrap() == 3
        assert result.unwrap_or(0) == 3
        assert repr(result) == "Ok(3)"

    def test_err(self) -> None:
        result: Result[int, str] = Result.Err("boom")
        assert result.is_error()
        assert result.unwrap_err() == "boom"
        assert result.unwrap_or(0) == 0
        with pytest.raises(ValueError):
            result.unwrap()

    def test_unwrap_err_on_ok(self) -> None:
        with pytest.raises(ValueError):
            Result.Ok(1).unwrap_err()

    def test_map(self) -> None:
        assert Result.Ok(2).map(lambda v: v * 5).unwrap() == 10
        assert Result.Err("e").map(lambda v: v * 5).unwrap_err() == "e"

    def test_capture(self) -> None:
        assert Result.capture(lambda: 4).unwrap() == 4
        failed = Result.capture(lambda: int("x"))
        assert failed.unwrap_err().startswith("ValueError: ")

    def test_capture_lets_interrupts_through(self) -> None:
        def interrupt() -> None:
            raise KeyboardInterrupt

        with pytest.raises(KeyboardInterrupt):
            Result.capture(interrupt)
