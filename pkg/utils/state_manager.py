"""
Pipeline progress tracking using the Observer pattern.

An experiment moves through named stages (dataset, keys, poison, ...). The
StateManager records the current stage, the completed stages and their wall
times, and notifies observers on every change.
"""

import logging
import time
from collections.abc import Iterator
from contextlib import contextmanager
from typing import Any

from core.errors import PipelineError

logger = logging.getLogger(__name__)


class StateObserver:
    """Receives the run state after every change; the base class ignores it."""

    def on_state_update(self, state: dict[str, Any]) -> None:
        return None


class LoggingObserver(StateObserver):
    """Logs every stage transition at INFO."""

    def __init__(self) -> None:
        self._last: str | None = None

    def on_state_update(self, state: dict[str, Any]) -> None:
        stage = state.get("stage")
        if stage and stage != self._last:
            logger.info(f"Stage: {stage}")
        self._last = stage


class StateManager:
    """
    Holds the state of one pipeline run and notifies subscribed observers.
    """

    def __init__(self) -> None:
        self._state: dict[str, Any] = {"stage": None, "completed": [], "timing": {}}
        self._observers: list[StateObserver] = []

    def set(self, key: str, value: Any) -> None:
        """Store one state entry and tell every observer."""
        self._state[key] = value
        self._notify()

    def get(self, key: str, default: Any = None) -> Any:
        return self._state.get(key, default)

    def subscribe(self, observer: StateObserver) -> None:
        if observer not in self._observers:
            self._observers.append(observer)

    def unsubscribe(self, observer: StateObserver) -> None:
        if observer in self._observers:
            self._observers.remove(observer)

    def _notify(self) -> None:
        for observer in self._observers:
            observer.on_state_update(self._state)

    def get_state(self) -> dict[str, Any]:
        """Shallow snapshot of the run state."""
        return dict(self._state)

    @property
    def completed(self) -> list[str]:
        return list(self._state["completed"])

    @property
    def timing(self) -> dict[str, float]:
        """Seconds spent in every completed stage."""
        return dict(self._state["timing"])

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """
        Run a block as the named stage.

        Raises:
            PipelineError: Wrapping any exception raised inside the block.
        """
        self.set("stage", name)
        started = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except Exception as exc:
            self.set("failed", name)
            raise PipelineError(name, exc) from exc
        self._state["timing"][name] = round(time.perf_counter() - started, 6)
        self._state["completed"].append(name)
        self._notify()
