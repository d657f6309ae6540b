"""
Experiment configuration.

A config is a JSON document with one object per section. Sections decode into
frozen dataclasses; unknown keys and invalid values raise ConfigError, so a
bad config fails at load time rather than halfway through a sweep.

Precedence (lowest first): preset, config file, ``--set`` overrides and
explicit CLI flags.
"""

import copy
import itertools
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, TypeVar

from core.constants import (
    DEFAULT_AUDIT_Z,
    DEFAULT_BACKDOOR_COUNT,
    DEFAULT_FRAME,
    DEFAULT_MLP_HIDDEN,
    DEFAULT_NOISE_BOUND,
    DEFAULT_NUM_LABELS,
    DEFAULT_POOL_PER_LABEL,
    DEFAULT_STEALTH_BUDGET,
    DEFAULT_TEST_PER_LABEL,
    DEFAULT_THRESHOLD,
    DEFAULT_TRAIN_PER_LABEL,
    WORKERS_ENV_VAR,
)
from core.errors import BackdoorLabError, ConfigError
from core.keys import Strategy
from core.training import Architecture, ModelSpec, TrainConfig
from harness.presets import get_preset

BUILTIN_PATTERNS = ("random", "cartoon", "reading", "sunglasses")
FULL_FRAME_PATTERNS = ("random", "cartoon")
INSTANCE_PATTERN = "instance"
PATTERN_DIR_PREFIX = "dir:"
WRONG_PATTERN_FOR = {
    "random": "cartoon",
    "cartoon": "random",
    "reading": "sunglasses",
    "sunglasses": "reading",
}
GRID_AXES = ("strategy", "pattern", "n", "alpha_train", "alpha_test")
MODES = ("full", "finetune")
DATASET_SOURCES = ("synth", "idx", "png")

C = TypeVar("C")


def _build(cls: type[C], data: dict[str, Any] | None, section: str) -> C:
    """Instantiate a dataclass section, turning any failure into ConfigError."""
    data = dict(data or {})
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError, BackdoorLabError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


@dataclass(frozen=True)
class DatasetConfig:
    """
    Where samples come from and how they are split.

    ``per_label`` is the synthetic sample count per label; the split then
    takes ``test_per_label`` and ``pool_per_label`` from every label and
    leaves the rest for training.
    """

    source: str = "synth"
    num_labels: int = DEFAULT_NUM_LABELS
    per_label: int = (
        DEFAULT_TRAIN_PER_LABEL + DEFAULT_POOL_PER_LABEL + DEFAULT_TEST_PER_LABEL
    )
    frame: tuple[int, int, int] = DEFAULT_FRAME
    test_per_label: int = DEFAULT_TEST_PER_LABEL
    pool_per_label: int = DEFAULT_POOL_PER_LABEL
    min_count: int = 1
    path: str | None = None
    labels_path: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "frame", tuple(int(v) for v in self.frame))
        if self.source not in DATASET_SOURCES:
            raise ConfigError(f"dataset.source must be one of {DATASET_SOURCES}")
        if self.source in ("idx", "png"):
            if not self.path or not Path(self.path).exists():
                raise ConfigError(f"dataset.path '{self.path}' does not exist")
        if self.source == "idx" and (
            not self.labels_path or not Path(self.labels_path).exists()
        ):
            raise ConfigError(
                f"dataset.labels_path '{self.labels_path}' does not exist"
            )
        if self.source == "synth":
            needed = self.test_per_label + self.pool_per_label + 1
            if self.per_label < needed:
                raise ConfigError(
                    f"dataset.per_label={self.per_label} leaves no training samples "
                    f"(needs >= {needed})"
                )
        if len(self.frame) != 3 or self.frame[2] not in (1, 3):
            raise ConfigError(
                f"dataset.frame must be [H, W, 1|3], got {list(self.frame)}"
            )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["frame"] = list(self.frame)
        return data


@dataclass(frozen=True)
class ModelConfig:
    """Architecture choice; the input shape and label count come from the data."""

    arch: str = Architecture.CNN_MICRO.value
    hidden: int = DEFAULT_MLP_HIDDEN

    def __post_init__(self) -> None:
        try:
            Architecture(self.arch)
        except ValueError as exc:
            raise ConfigError(f"unknown model.arch '{self.arch}'") from exc

    def spec_for(self, frame: tuple[int, int, int], num_labels: int) -> ModelSpec:
        return ModelSpec(Architecture(self.arch), frame, num_labels, self.hidden)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class AttackConfig:
    """
    One attack point.

    ``pattern`` is ``instance`` for input-instance keys, a built-in pattern
    name, or ``dir:<path>`` for a key saved with ``save_pattern_key``.
    ``wrong_pattern`` defaults to the paired built-in pattern.
    """

    strategy: str = Strategy.INPUT_INSTANCE.value
    pattern: str = INSTANCE_PATTERN
    wrong_pattern: str | None = None
    scale: str = "medium"
    target_label: int = 0
    n: int = 5
    alpha_train: float = 1.0
    alpha_test: float = 1.0
    noise_bound: float = DEFAULT_NOISE_BOUND
    backdoor_count: int = DEFAULT_BACKDOOR_COUNT
    include_key: bool = False

    def __post_init__(self) -> None:
        try:
            strategy = Strategy(self.strategy)
        except ValueError as exc:
            raise ConfigError(f"unknown attack.strategy '{self.strategy}'") from exc
        if self.n < 1:
            raise ConfigError(f"attack.n must be >= 1 (BackdoorSpec), got {self.n}")
        if self.target_label < 0:
            raise ConfigError(
                f"attack.target_label must be >= 0, got {self.target_label}"
            )
        for name in ("alpha_train", "alpha_test"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"attack.{name} must lie in [0, 1], got {value}")
        if self.scale not in ("small", "medium", "large"):
            raise ConfigError(
                f"attack.scale must be small, medium or large, got {self.scale}"
            )
        if self.backdoor_count < 1:
            raise ConfigError("attack.backdoor_count must be >= 1")
        if strategy is Strategy.INPUT_INSTANCE:
            if self.pattern != INSTANCE_PATTERN:
                raise ConfigError("input-instance attacks take pattern 'instance'")
            return
        for name in (self.pattern, self.wrong_pattern):
            if name is None:
                continue
            if name.startswith(PATTERN_DIR_PREFIX):
                if not Path(name[len(PATTERN_DIR_PREFIX) :]).is_dir():
                    raise ConfigError(f"pattern directory '{name}' does not exist")
            elif name not in BUILTIN_PATTERNS:
                raise ConfigError(f"unknown pattern '{name}'")
        if self.pattern == self.wrong_pattern:
            raise ConfigError("attack.wrong_pattern must differ from attack.pattern")
        if self.wrong_pattern is None and self.pattern not in WRONG_PATTERN_FOR:
            raise ConfigError(
                f"pattern '{self.pattern}' needs an explicit wrong_pattern"
            )
        if strategy is Strategy.BLENDED:
            for name in (self.pattern, self.resolved_wrong_pattern):
                if name not in FULL_FRAME_PATTERNS and not name.startswith(
                    PATTERN_DIR_PREFIX
                ):
                    raise ConfigError(
                        f"blended injection needs a full-frame pattern, not {name}"
                    )

    @property
    def resolved_wrong_pattern(self) -> str:
        return self.wrong_pattern or WRONG_PATTERN_FOR.get(
            self.pattern, INSTANCE_PATTERN
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class GridConfig:
    """
    Sweep axes. An axis left out keeps the base attack's value; an axis
    given must be non-empty.
    """

    strategy: list[str] | None = None
    pattern: list[str] | None = None
    n: list[int] | None = None
    alpha_train: list[float] | None = None
    alpha_test: list[float] | None = None
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self) -> None:
        for axis in (*GRID_AXES, "seeds"):
            values = getattr(self, axis)
            if values is not None and len(values) == 0:
                raise ConfigError(f"grid axis '{axis}' is empty")

    def axes(self) -> dict[str, list[Any]]:
        return {axis: getattr(self, axis) for axis in GRID_AXES if getattr(self, axis)}

    def points(self, base: AttackConfig) -> list[AttackConfig]:
        """Every attack point of the grid, in axis-product order."""
        axes = self.axes()
        if not axes:
            return [base]
        points = []
        for combo in itertools.product(*axes.values()):
            overrides = dict(zip(axes.keys(), combo, strict=True))
            if (
                "strategy" in overrides
                and Strategy(overrides["strategy"]) is Strategy.INPUT_INSTANCE
            ):
                overrides["pattern"] = INSTANCE_PATTERN
            try:
                points.append(replace(base, **overrides))
            except ConfigError as exc:
                raise ConfigError(f"grid point {overrides}: {exc}") from exc
        return points

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class CrossSubjectConfig:
    """Leave-one-out protocol over fresh synthetic subjects."""

    subjects: int = 5
    photos_per_subject: int = 20
    m_values: list[int] = field(default_factory=lambda: [0, 20, 80])

    def __post_init__(self) -> None:
        if self.subjects < 2:
            raise ConfigError("cross_subject.subjects must be >= 2")
        if self.photos_per_subject < 1:
            raise ConfigError("cross_subject.photos_per_subject must be >= 1")
        if not self.m_values or any(m < 0 for m in self.m_values):
            raise ConfigError(
                "cross_subject.m_values must be a non-empty list of m >= 0"
            )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class EvaluationConfig:
    threshold: float = DEFAULT_THRESHOLD
    not_sure_counts_as_error: bool = True
    stealth_budget: float = DEFAULT_STEALTH_BUDGET

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(
                f"evaluation.threshold must lie in [0, 1], got {self.threshold}"
            )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class DefenseConfig:
    audit: bool = False
    audit_z: float = DEFAULT_AUDIT_Z
    prune_eta: float | None = None
    aux_pristine: bool = False

    def __post_init__(self) -> None:
        if self.prune_eta is not None and not 0.0 < self.prune_eta < 1.0:
            raise ConfigError(
                f"defenses.prune_eta must lie in (0, 1), got {self.prune_eta}"
            )

    @property
    def any_enabled(self) -> bool:
        return self.audit or self.prune_eta is not None or self.aux_pristine

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV_VAR, "1")
    try:
        workers = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV_VAR}='{raw}' is not an integer") from exc
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV_VAR} must be >= 1, got {workers}")
    return workers


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment, sweep or cross-subject study needs."""

    name: str = "experiment"
    seed: int = 0
    output: str = "runs"
    workers: int = 1
    mode: str = "full"
    save_artifacts: bool = True
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    cross_subject: CrossSubjectConfig = field(default_factory=CrossSubjectConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    defenses: DefenseConfig = field(default_factory=DefenseConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.model.arch == Architecture.SOFTMAX.value:
            if self.mode == "finetune" or self.defenses.aux_pristine:
                raise ConfigError(
                    "fine-tuning needs an architecture with a feature prefix"
                )
        if self.dataset.source == "synth":
            self._check_target(self.attack.target_label)

    def _check_target(self, target: int) -> None:
        if target >= self.dataset.num_labels:
            raise ConfigError(
                f"attack.target_label {target} outside the {self.dataset.num_labels} labels"
            )

    def model_spec(self, frame: tuple[int, int, int], num_labels: int) -> ModelSpec:
        return self.model.spec_for(frame, num_labels)

    def to_dict(self) -> dict[str, Any]:
        """Convert config to a JSON-ready dictionary."""
        return {
            "name": self.name,
            "seed": self.seed,
            "output": self.output,
            "workers": self.workers,
            "mode": self.mode,
            "save_artifacts": self.save_artifacts,
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "attack": self.attack.to_dict(),
            "grid": self.grid.to_dict(),
            "cross_subject": self.cross_subject.to_dict(),
            "evaluation": self.evaluation.to_dict(),
            "defenses": self.defenses.to_dict(),
        }

    def semantic_dict(self) -> dict[str, Any]:
        """``to_dict`` minus fields that do not change results (paths, workers)."""
        data = self.to_dict()
        for key in ("output", "workers", "save_artifacts"):
            data.pop(key)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        """Create a config from a dictionary, validating every section."""
        data = dict(data)
        sections = {
            "dataset": DatasetConfig,
            "model": ModelConfig,
            "attack": AttackConfig,
            "grid": GridConfig,
            "cross_subject": CrossSubjectConfig,
            "evaluation": EvaluationConfig,
            "defenses": DefenseConfig,
        }
        built: dict[str, Any] = {
            name: _build(section, data.pop(name, None), name)
            for name, section in sections.items()
        }
        train_data = dict(data.pop("train", None) or {})
        if "seed" in train_data:
            raise ConfigError(
                "train.seed is derived from the top-level seed; remove it"
            )
        built["train"] = _build(TrainConfig, train_data, "train")
        if "workers" not in data:
            data["workers"] = default_workers()
        top_level = {f.name for f in fields(cls)} - set(sections) - {"train"}
        unknown = sorted(set(data) - top_level)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        try:
            return cls(**data, **built)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def deep_merge(base: dict[str, Any], overlay: dict[str, Any]) -> dict[str, Any]:
    """Recursively merge ``overlay`` into a copy of ``base``."""
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(expression: str) -> dict[str, Any]:
    """
    Turn ``attack.n=15`` into ``{"attack": {"n": 15}}``.

    Values are parsed as JSON when possible and kept as strings otherwise.
    """
    if "=" not in expression:
        raise ConfigError(f"override '{expression}' is not of the form key.path=value")
    path, raw = expression.split("=", 1)
    keys = [part for part in path.strip().split(".") if part]
    if not keys:
        raise ConfigError(f"override '{expression}' has an empty key path")
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: dict[str, Any] = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        nested = {key: nested}
    return nested


def load_config_dict(path: str | Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file '{path}' not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file '{path}' is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file '{path}' must hold a JSON object")
    return data


def load_config(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: list[str] | None = None,
    extra: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """
    Build an ExperimentConfig from a preset, a JSON file and overrides.

    Args:
        path: Optional JSON config file.
        preset: Optional built-in preset name.
        overrides: ``key.path=value`` expressions.
        extra: Already-nested overrides from explicit CLI flags.
    """
    data: dict[str, Any] = get_preset(preset) if preset else {}
    if path is not None:
        data = deep_merge(data, load_config_dict(path))
    for expression in overrides or []:
        data = deep_merge(data, parse_override(expression))
    if extra:
        data = deep_merge(data, extra)
    return ExperimentConfig.from_dict(data)
