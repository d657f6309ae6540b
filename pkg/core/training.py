"""
Deterministic classifier engine: softmax regression, one-hidden-layer MLP and
a micro-CNN, trained by mini-batch SGD with momentum in double precision.

Pixels enter the networks scaled to [-0.5, 0.5]; everything before that stays in
the 8-bit domain.
"""

import copy
import logging
import math
from collections import OrderedDict
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, cast

import numpy as np
import torch
import torch.nn.functional as F  # noqa: N812
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from core.constants import (
    DEFAULT_BATCH,
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    DEFAULT_LR_DECAY,
    DEFAULT_MLP_HIDDEN,
    DEFAULT_MOMENTUM,
    DEFAULT_THRESHOLD,
    DEFAULT_TRAIN_PER_LABEL,
    DIVERGENCE_LOSS_MARGIN,
    DIVERGENCE_PATIENCE,
    GRAD_CHECK_COORDINATES,
    NOT_SURE,
)
from core.datasets import (
    LabeledDataset,
    TrainingData,
    as_labeled,
    balanced_epoch_indices,
)
from core.errors import (
    EmptyEvalError,
    InvalidParameterError,
    LabelError,
    ModeError,
    NumericalError,
    ShapeError,
    TrainingError,
)
from core.imaging import Image, Shape
from core.rng import RngStream

logger = logging.getLogger(__name__)

DTYPE = torch.float64
OUTPUT_LAYER = "output"
_EVAL_CHUNK = 256


def configure_torch() -> None:
    """Pin torch to one CPU thread and deterministic kernels."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


class Architecture(str, Enum):
    SOFTMAX = "softmax"
    MLP = "mlp"
    CNN_MICRO = "cnn-micro"


class SelectOn(str, Enum):
    """Which epoch's parameters ``train`` returns."""

    FINAL = "final"
    BEST_TEST = "best-test"


@dataclass(frozen=True)
class ModelSpec:
    """
    Architecture f of a classifier.

    Attributes:
        arch: Network family.
        input_shape: (H, W, C) of the images it accepts.
        num_labels: Size of the label space (>= 2).
        hidden: Hidden width, used by the MLP only.
    """

    arch: Architecture
    input_shape: Shape
    num_labels: int
    hidden: int = DEFAULT_MLP_HIDDEN

    def __post_init__(self) -> None:
        object.__setattr__(self, "arch", Architecture(self.arch))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.num_labels < 2:
            raise InvalidParameterError(
                f"num_labels must be >= 2, got {self.num_labels}"
            )
        if self.arch is Architecture.MLP and self.hidden < 1:
            raise InvalidParameterError(
                f"MLP hidden width must be >= 1, got {self.hidden}"
            )
        height, width, _ = self.input_shape
        if self.arch is Architecture.CNN_MICRO and (height < 4 or width < 4):
            raise ShapeError("cnn-micro needs frames of at least 4x4 pixels")

    def to_dict(self) -> dict[str, Any]:
        return {
            "arch": self.arch.value,
            "input_shape": list(self.input_shape),
            "num_labels": self.num_labels,
            "hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelSpec":
        return cls(
            arch=Architecture(data["arch"]),
            input_shape=tuple(data["input_shape"]),  # type: ignore[arg-type]
            num_labels=int(data["num_labels"]),
            hidden=int(data.get("hidden", DEFAULT_MLP_HIDDEN)),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings; the defaults are choices for desk-scale runs."""

    epochs: int = DEFAULT_EPOCHS
    per_label: int = DEFAULT_TRAIN_PER_LABEL
    batch: int = DEFAULT_BATCH
    lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    lr_decay: float = DEFAULT_LR_DECAY
    seed: int = 0
    select_on: SelectOn = SelectOn.BEST_TEST

    def __post_init__(self) -> None:
        object.__setattr__(self, "select_on", SelectOn(self.select_on))
        if self.epochs < 0:
            raise InvalidParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.per_label < 1:
            raise InvalidParameterError(f"per_label must be >= 1, got {self.per_label}")
        if self.batch < 1:
            raise InvalidParameterError(f"batch must be >= 1, got {self.batch}")
        if self.lr <= 0:
            raise InvalidParameterError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise InvalidParameterError(
                f"momentum must lie in [0, 1), got {self.momentum}"
            )
        if self.lr_decay <= 0:
            raise InvalidParameterError(f"lr_decay must be > 0, got {self.lr_decay}")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["select_on"] = self.select_on.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return cls(**data)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float


@dataclass(frozen=True)
class TrainHistory:
    """Per-epoch statistics and the index of the epoch whose parameters were kept."""

    records: tuple[EpochRecord, ...] = field(default=())
    selected_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class DivergenceMonitor:
    """
    Catches runs that collapse while the loss stays finite.

    An epoch is bad when its training loss exceeds the lowest epoch loss seen
    so far by more than ``margin * ln(num_labels)`` nats, or when its training
    accuracy has fallen below half the best so far. ``patience`` bad epochs
    in a row raise ``TrainingError``.
    """

    num_labels: int
    patience: int = DIVERGENCE_PATIENCE
    margin: float = DIVERGENCE_LOSS_MARGIN
    best_loss: float = math.inf
    best_accuracy: float = 0.0
    streak: int = 0

    def update(self, record: EpochRecord) -> None:
        loss_up = (
            record.train_loss > self.best_loss + self.margin * math.log(self.num_labels)
        )
        accuracy_down = (
            self.best_accuracy >= 2.0 / self.num_labels
            and record.train_accuracy < self.best_accuracy / 2
        )
        self.best_loss = min(self.best_loss, record.train_loss)
        self.best_accuracy = max(self.best_accuracy, record.train_accuracy)
        self.streak = self.streak + 1 if loss_up or accuracy_down else 0
        if self.streak >= self.patience:
            raise TrainingError(
                f"training collapsed for {self.streak} epochs: loss "
                f"{record.train_loss:.4f} (best {self.best_loss:.4f}), train "
                f"accuracy {record.train_accuracy:.3f} "
                f"(best {self.best_accuracy:.3f})",
                record.epoch,
            )


def build_network(spec: ModelSpec) -> nn.Sequential:
    height, width, channels = spec.input_shape
    features = height * width * channels
    layers: OrderedDict[str, nn.Module] = OrderedDict()
    if spec.arch is Architecture.SOFTMAX:
        layers["flatten"] = nn.Flatten()
        layers[OUTPUT_LAYER] = nn.Linear(features, spec.num_labels, dtype=DTYPE)
    elif spec.arch is Architecture.MLP:
        layers["flatten"] = nn.Flatten()
        layers["hidden"] = nn.Linear(features, spec.hidden, dtype=DTYPE)
        layers["relu"] = nn.ReLU()
        layers[OUTPUT_LAYER] = nn.Linear(spec.hidden, spec.num_labels, dtype=DTYPE)
    else:
        layers["conv1"] = nn.Conv2d(channels, 8, 3, stride=1, padding=1, dtype=DTYPE)
        layers["relu1"] = nn.ReLU()
        layers["pool1"] = nn.MaxPool2d(2)
        layers["conv2"] = nn.Conv2d(8, 16, 3, stride=1, padding=1, dtype=DTYPE)
        layers["relu2"] = nn.ReLU()
        layers["pool2"] = nn.MaxPool2d(2)
        layers["flatten"] = nn.Flatten()
        pooled = (height // 2 // 2) * (width // 2 // 2)
        layers[OUTPUT_LAYER] = nn.Linear(16 * pooled, spec.num_labels, dtype=DTYPE)
    return nn.Sequential(layers)


class Model:
    """
    A network plus its spec; ``frozen_prefix`` leaves only the output layer trainable.
    """

    def __init__(
        self, spec: ModelSpec, network: nn.Sequential, frozen_prefix: bool = False
    ):
        self.spec = spec
        self.network = network
        self.frozen_prefix = False
        self.set_frozen_prefix(frozen_prefix)

    def set_frozen_prefix(self, frozen: bool) -> None:
        self.frozen_prefix = frozen
        for name, parameter in self.network.named_parameters():
            parameter.requires_grad_(not frozen or name.startswith(f"{OUTPUT_LAYER}."))

    @property
    def output_layer(self) -> nn.Linear:
        return cast(nn.Linear, getattr(self.network, OUTPUT_LAYER))

    def parameters(self) -> list[nn.Parameter]:
        return list(self.network.parameters())

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.network.parameters() if p.requires_grad]

    def prefix_parameters(self) -> list[nn.Parameter]:
        return [
            p
            for name, p in self.network.named_parameters()
            if not name.startswith(f"{OUTPUT_LAYER}.")
        ]

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.network.parameters())

    @property
    def trainable_count(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters())

    def parameter_vector(self) -> np.ndarray:
        """All parameters θ as one flat float64 vector, in layer order."""
        with torch.no_grad():
            return parameters_to_vector(self.parameters()).numpy().copy()

    def load_vector(self, values: np.ndarray) -> None:
        if values.shape != (self.parameter_count,):
            raise ShapeError(
                f"expected {self.parameter_count} parameters, got {values.shape}"
            )
        with torch.no_grad():
            vector_to_parameters(
                torch.from_numpy(values.astype(np.float64)), self.parameters()
            )

    def named_slices(self) -> dict[str, tuple[int, int]]:
        """Start/stop offsets of every named parameter inside ``parameter_vector``."""
        slices: dict[str, tuple[int, int]] = {}
        offset = 0
        for name, parameter in self.network.named_parameters():
            slices[name] = (offset, offset + parameter.numel())
            offset += parameter.numel()
        return slices

    def copy(self) -> "Model":
        return Model(self.spec, copy.deepcopy(self.network), self.frozen_prefix)

    def __repr__(self) -> str:
        return (
            f"Model({self.spec.arch.value}, params={self.parameter_count}, "
            f"frozen_prefix={self.frozen_prefix})"
        )


def _glorot_(layer: nn.Linear | nn.Conv2d, rng: RngStream) -> None:
    weight = layer.weight
    receptive = int(np.prod(weight.shape[2:])) if weight.dim() > 2 else 1
    fan_in = weight.shape[1] * receptive
    fan_out = weight.shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    values = rng.generator().uniform(-bound, bound, size=tuple(weight.shape))
    with torch.no_grad():
        weight.copy_(torch.from_numpy(values))
        if layer.bias is not None:
            layer.bias.zero_()


def init_model(spec: ModelSpec, rng: RngStream) -> Model:
    """
    Build a model with Glorot-uniform weights and zero biases.

    Each layer draws from its own sub-stream, so the result depends only on
    the model spec and the stream.
    """
    network = build_network(spec)
    for name, module in network.named_children():
        if isinstance(module, nn.Linear | nn.Conv2d):
            _glorot_(module, rng.child("init", name))
    return Model(spec, network)


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    scaled = images.astype(np.float64) / 255.0 - 0.5
    return torch.from_numpy(scaled).permute(0, 3, 1, 2).contiguous()


def _check_frame(model: Model, frame: tuple[int, ...]) -> None:
    if tuple(frame) != model.spec.input_shape:
        raise ShapeError(
            f"image shape {tuple(frame)} != model input {model.spec.input_shape}"
        )


def _stack(images: Sequence[Image] | np.ndarray) -> np.ndarray:
    if isinstance(images, np.ndarray):
        return images
    return np.stack([img.pixels for img in images])


def logits(model: Model, images: np.ndarray) -> torch.Tensor:
    """Raw scores for a (N, H, W, C) uint8 batch."""
    _check_frame(model, images.shape[1:])
    return model.network(_to_tensor(images))


def probabilities(model: Model, images: Sequence[Image] | np.ndarray) -> np.ndarray:
    """(N, num_labels) softmax outputs for a batch of images."""
    if len(images) == 0:
        return np.zeros((0, model.spec.num_labels))
    stacked = _stack(images)
    _check_frame(model, stacked.shape[1:])
    chunks = []
    with torch.no_grad():
        for start in range(0, stacked.shape[0], _EVAL_CHUNK):
            batch = stacked[start : start + _EVAL_CHUNK]
            chunks.append(torch.softmax(logits(model, batch), dim=1).numpy())
    return np.concatenate(chunks)


def forward(model: Model, img: Image) -> np.ndarray:
    """Probability vector over labels for one image."""
    _check_frame(model, img.shape)
    return probabilities(model, img.pixels[None])[0]


def _batch_arrays(
    batch: Sequence[tuple[Image, int]],
) -> tuple[np.ndarray, torch.Tensor]:
    if not batch:
        raise InvalidParameterError("batch must not be empty")
    images = np.stack([img.pixels for img, _ in batch])
    labels = torch.tensor([label for _, label in batch], dtype=torch.int64)
    return images, labels


def loss_and_grad(
    model: Model, batch: Sequence[tuple[Image, int]]
) -> tuple[float, np.ndarray]:
    """
    Mean cross-entropy over ``batch`` and its gradient over the trainable parameters.

    Raises:
        NumericalError: If the loss is not finite.
    """
    images, labels = _batch_arrays(batch)
    loss = F.cross_entropy(logits(model, images), labels)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss {loss.item()} on a batch of {len(batch)}"
        )
    grads = torch.autograd.grad(loss, model.trainable_parameters())
    gradient = torch.cat([g.reshape(-1) for g in grads]).detach().numpy().copy()
    return float(loss.item()), gradient


def _logits_and_switches(
    model: Model, images: np.ndarray
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Logits plus the ReLU sign patterns and max-pool winners of one forward pass."""
    switches: list[torch.Tensor] = []

    def relu_hook(
        _module: nn.Module, inputs: tuple[torch.Tensor, ...], _out: Any
    ) -> None:
        switches.append(inputs[0] > 0)

    def pool_hook(
        _module: nn.Module, inputs: tuple[torch.Tensor, ...], _out: Any
    ) -> None:
        switches.append(F.max_pool2d(inputs[0], 2, return_indices=True)[1])

    handles = []
    for module in model.network.modules():
        if isinstance(module, nn.ReLU):
            handles.append(module.register_forward_hook(relu_hook))
        elif isinstance(module, nn.MaxPool2d):
            handles.append(module.register_forward_hook(pool_hook))
    try:
        with torch.no_grad():
            outputs = logits(model, images)
    finally:
        for handle in handles:
            handle.remove()
    return outputs, switches


def _loss_difference(
    plus: torch.Tensor, minus: torch.Tensor, labels: torch.Tensor
) -> float:
    """
    Mean cross-entropy at ``plus`` logits minus that at ``minus`` logits.

    Computed from the logit differences rather than by subtracting two losses.
    """
    delta = plus - minus
    weights = F.softmax(minus, dim=1)
    shift = torch.log1p((weights * torch.expm1(delta)).sum(dim=1))
    return float((shift - delta.gather(1, labels[:, None]).squeeze(1)).mean())


def grad_check(
    model: Model,
    batch: Sequence[tuple[Image, int]],
    epsilon: float = 1e-5,
    coordinates: int = GRAD_CHECK_COORDINATES,
    rng: RngStream | None = None,
) -> float:
    """
    Compare ``loss_and_grad`` against central finite differences.

    Coordinates are drawn at random among the trainable parameters. A
    coordinate whose +/- epsilon perturbation flips a ReLU or changes a
    max-pool winner sits on a kink and is replaced by the next candidate.

    Returns:
        max |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    if not epsilon > 0:
        raise InvalidParameterError(f"epsilon must be > 0, got {epsilon}")
    _, analytic = loss_and_grad(model, batch)
    images, labels = _batch_arrays(batch)
    trainable = model.trainable_parameters()
    with torch.no_grad():
        theta = parameters_to_vector(trainable).clone()
    stream = rng or RngStream(0, ("grad-check",))
    candidates = stream.generator().permutation(theta.numel())
    worst = 0.0
    checked = kinks = 0
    try:
        for index in candidates:
            if checked >= coordinates:
                break
            shifted = theta.clone()
            shifted[index] += epsilon
            vector_to_parameters(shifted, trainable)
            plus, switches_plus = _logits_and_switches(model, images)
            shifted[index] -= 2 * epsilon
            vector_to_parameters(shifted, trainable)
            minus, switches_minus = _logits_and_switches(model, images)
            if any(
                not torch.equal(a, b)
                for a, b in zip(switches_plus, switches_minus, strict=True)
            ):
                kinks += 1
                continue
            numeric = _loss_difference(plus, minus, labels) / (2 * epsilon)
            exact = float(analytic[index])
            error = abs(exact - numeric) / max(1e-12, abs(exact) + abs(numeric))
            worst = max(worst, error)
            checked += 1
    finally:
        vector_to_parameters(theta, trainable)
    logger.debug(
        f"Gradient check: {checked} coordinates, {kinks} kinks skipped, max {worst:.3e}"
    )
    return worst


def argmax_accuracy(model: Model, ds: LabeledDataset) -> float:
    """Fraction of samples whose unthresholded argmax equals the label."""
    if len(ds) == 0:
        return float("nan")
    predicted = probabilities(model, ds.images).argmax(axis=1)
    return float(np.mean(predicted == ds.labels))


def _check_compatible(
    model: Model, train_set: LabeledDataset, test: LabeledDataset
) -> None:
    for name, ds in (("training", train_set), ("test", test)):
        if ds.label_count != model.spec.num_labels:
            raise LabelError(
                f"{name} set has {ds.label_count} labels, model expects {model.spec.num_labels}"
            )
        if tuple(ds.frame) != model.spec.input_shape:
            raise ShapeError(
                f"{name} frame {ds.frame} != model input {model.spec.input_shape}"
            )


def train(
    model: Model, data: TrainingData, test: LabeledDataset, cfg: TrainConfig
) -> tuple[Model, TrainHistory]:
    """
    Mini-batch SGD with momentum on class-balanced epochs.

    Every epoch resamples ``cfg.per_label`` samples per label, shuffles them
    and steps through them in batches, with learning rate lr * decay^epoch.
    The input model is left untouched.

    Returns:
        The ``cfg.select_on`` checkpoint (ties go to the latest epoch) and the
        full history.

    Raises:
        TrainingError: If the loss becomes NaN or infinite, or the run
            collapses as judged by ``DivergenceMonitor``.
    """
    configure_torch()
    train_set = as_labeled(data)
    _check_compatible(model, train_set, test)
    if cfg.select_on is SelectOn.BEST_TEST and len(test) == 0 and cfg.epochs:
        raise EmptyEvalError("best-test selection needs a non-empty test set")
    working = model.copy()
    if cfg.epochs == 0:
        return working, TrainHistory()

    optimizer = torch.optim.SGD(
        working.trainable_parameters(), lr=cfg.lr, momentum=cfg.momentum
    )
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=cfg.lr_decay)
    stream = RngStream(cfg.seed, ("train",))
    labels_all = torch.from_numpy(train_set.labels)
    records: list[EpochRecord] = []
    best_accuracy = -1.0
    best_state: dict[str, torch.Tensor] | None = None
    selected = cfg.epochs - 1
    monitor = DivergenceMonitor(working.spec.num_labels)

    for epoch in range(cfg.epochs):
        order = balanced_epoch_indices(
            train_set, cfg.per_label, stream.child("epoch", epoch)
        )
        loss_sum = 0.0
        correct = 0
        for start in range(0, order.size, cfg.batch):
            index = order[start : start + cfg.batch]
            optimizer.zero_grad()
            scores = logits(working, train_set.images[index])
            targets = labels_all[torch.from_numpy(index)]
            loss = F.cross_entropy(scores, targets)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged to {loss.item()}", epoch)
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.item()) * index.size
            correct += int((scores.argmax(dim=1) == targets).sum())
        scheduler.step()

        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / max(order.size, 1),
            train_accuracy=correct / max(order.size, 1),
            test_accuracy=argmax_accuracy(working, test),
        )
        records.append(record)
        message = (
            f"Epoch {epoch + 1}/{cfg.epochs}: loss={record.train_loss:.4f} "
            f"train_acc={record.train_accuracy:.3f} test_acc={record.test_accuracy:.3f}"
        )
        if epoch in (0, cfg.epochs - 1):
            logger.info(message)
        else:
            logger.debug(message)
        monitor.update(record)
        if (
            cfg.select_on is SelectOn.BEST_TEST
            and record.test_accuracy >= best_accuracy
        ):
            best_accuracy = record.test_accuracy
            best_state = copy.deepcopy(working.network.state_dict())
            selected = epoch

    if cfg.select_on is SelectOn.BEST_TEST and best_state is not None:
        working.network.load_state_dict(best_state)
        logger.info(
            f"Selected epoch {selected + 1} (test accuracy {best_accuracy:.3f})"
        )
    return working, TrainHistory(records=tuple(records), selected_epoch=selected)


def finetune_last_layer(
    feature_model: Model, data: TrainingData, test: LabeledDataset, cfg: TrainConfig
) -> tuple[Model, TrainHistory]:
    """
    Freeze every layer before the output layer, re-initialise the output layer
    and train only it on ``data``.

    Raises:
        ModeError: For the softmax architecture, which has no prefix to freeze.
    """
    if feature_model.spec.arch is Architecture.SOFTMAX:
        raise ModeError("softmax regression has no feature prefix to freeze")
    model = feature_model.copy()
    model.set_frozen_prefix(True)
    _glorot_(model.output_layer, RngStream(cfg.seed, ("finetune", "init")))
    logger.info(
        f"Fine-tuning {model.trainable_count} of {model.parameter_count} parameters"
    )
    return train(model, data, test, cfg)


def _check_threshold(threshold: float) -> None:
    if not 0.0 <= threshold <= 1.0:
        raise InvalidParameterError(f"threshold must lie in [0, 1], got {threshold}")


def verdicts_from_probabilities(
    probs: np.ndarray, threshold: float = DEFAULT_THRESHOLD
) -> tuple[np.ndarray, np.ndarray]:
    """
    Vectorised ``predict``: argmax where the top probability is strictly above
    ``threshold``, NOT_SURE elsewhere.
    """
    _check_threshold(threshold)
    top = probs.max(axis=1) if probs.size else np.zeros(0)
    labels = probs.argmax(axis=1) if probs.size else np.zeros(0, dtype=np.int64)
    verdicts = np.where(top > threshold, labels, NOT_SURE).astype(np.int64)
    return verdicts, top


def predict(
    model: Model, img: Image, threshold: float = DEFAULT_THRESHOLD
) -> tuple[int, float]:
    """(label or NOT_SURE, top probability) for one image."""
    verdicts, top = verdicts_from_probabilities(forward(model, img)[None], threshold)
    return int(verdicts[0]), float(top[0])
