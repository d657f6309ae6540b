"""
Centralized error handling for the command-line surface.

Exceptions are logged once and translated into process exit codes:
0 on success, 1 for configuration errors, 2 for pipeline errors.
"""

import functools
import logging
from collections.abc import Callable
from typing import Any

from core.constants import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_PIPELINE_ERROR
from core.errors import ConfigError, PipelineError

logger = logging.getLogger(__name__)


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG_ERROR
    if isinstance(exc, PipelineError) and isinstance(exc.cause, ConfigError):
        return EXIT_CONFIG_ERROR
    return EXIT_PIPELINE_ERROR


def handle_exception(exc: Exception, title: str = "Error", log: bool = True) -> int:
    """
    Log an exception and return its exit code.

    Args:
        exc: The exception instance.
        title: Prefix for the log message.
        log: Whether to log the error.
    """
    code = exit_code_for(exc)
    if log:
        if code == EXIT_CONFIG_ERROR:
            logger.error(f"{title}: {exc}")
        else:
            logger.error(f"{title}: {exc}", exc_info=True)
    return code


def error_handling_decorator(
    title: str = "Error", log: bool = True
) -> Callable[[Callable[..., int | None]], Callable[..., int]]:
    """
    Wrap a command so that it always returns an exit code instead of raising.
    """

    def decorator(func: Callable[..., int | None]) -> Callable[..., int]:
        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> int:
            try:
                result = func(*args, **kwargs)
            except Exception as exc:
                return handle_exception(exc, title=title, log=log)
            return EXIT_OK if result is None else result

        return wrapper

    return decorator
