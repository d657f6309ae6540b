"""Tests for exit-code translation."""

import logging

import pytest

from core.constants import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_PIPELINE_ERROR
from core.errors import ConfigError, PipelineError, SplitError
from utils.error_handling import (
    error_handling_decorator,
    exit_code_for,
    handle_exception,
)


class TestExitCodes:
    """Test cases for exception classification."""

    def test_config_error(self) -> None:
        assert exit_code_for(ConfigError("bad")) == EXIT_CONFIG_ERROR

    def test_pipeline_error_caused_by_config(self) -> None:
        error = PipelineError("dataset", ConfigError("bad"))
        assert exit_code_for(error) == EXIT_CONFIG_ERROR

    def test_pipeline_error(self) -> None:
        error = PipelineError("dataset", SplitError("small"))
        assert exit_code_for(error) == EXIT_PIPELINE_ERROR

    def test_anything_else(self) -> None:
        assert exit_code_for(RuntimeError("x")) == EXIT_PIPELINE_ERROR

    def test_handle_exception_logs(self, caplog: pytest.LogCaptureFixture) -> None:
        with caplog.at_level(logging.ERROR):
            code = handle_exception(ConfigError("no such preset"), "Load")
            assert code == EXIT_CONFIG_ERROR
        assert "Load: no such preset" in caplog.text


class TestDecorator:
    """Test cases for error_handling_decorator."""

    def test_none_means_success(self) -> None:
        assert error_handling_decorator()(lambda: None)() == EXIT_OK

    def test_returned_code_passes_through(self) -> None:
        assert error_handling_decorator()(lambda: 7)() == 7

    def test_exception_becomes_code(self) -> None:
        @error_handling_decorator("cmd", log=False)
        def failing() -> None:
            raise ConfigError("bad")

        assert failing() == EXIT_CONFIG_ERROR
