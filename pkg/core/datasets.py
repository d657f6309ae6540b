"""
Labelled datasets, splitting, balanced resampling and poisoned-set assembly.

Datasets are immutable: samples live in one read-only uint8 array of shape
(N, H, W, C) next to a label vector and a per-sample poison flag.
"""

import json
import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

from core.constants import (
    IDX_UBYTE_TYPE,
    POISON_RATIO_WARNING,
    SYNTH_BRIGHTNESS,
    SYNTH_MAX_SHIFT,
    SYNTH_NOISE_SIGMA,
)
from core.errors import (
    EmptyDatasetError,
    FormatError,
    InvalidParameterError,
    LabelError,
    ProtocolError,
    ShapeError,
    SplitError,
)
from core.image_io import read_png, write_png
from core.imaging import Image, Shape, clip, render_blobs
from core.keys import PoisoningSample
from core.rng import RngStream
from core.utils import combined_hash, image_identity, sample_identity

logger = logging.getLogger(__name__)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    An immutable set of (image, label) samples with provenance flags.

    Attributes:
        images: (N, H, W, C) uint8 pixels.
        labels: (N,) int64 label ids in [0, label_count).
        label_count: Size of the label space.
        frame: (H, W, C) of every image; kept explicitly so empty sets have a shape.
        is_poison: (N,) bool, True for poisoning samples.
        label_names: Human-readable name per label id.
    """

    images: np.ndarray
    labels: np.ndarray
    label_count: int
    frame: Shape
    is_poison: np.ndarray | None = None
    label_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        images = np.asarray(self.images, dtype=np.uint8)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        frame = tuple(int(v) for v in self.frame)
        if images.shape[1:] != frame or images.shape[0] != labels.shape[0]:
            raise ShapeError(
                f"images {images.shape} and labels {labels.shape} do not match frame {frame}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.label_count):
            raise LabelError(f"labels must lie in [0, {self.label_count})")
        flags = (
            np.zeros(labels.shape[0], dtype=bool)
            if self.is_poison is None
            else np.asarray(self.is_poison, dtype=bool)
        )
        names = self.label_names or tuple(str(i) for i in range(self.label_count))
        if len(names) != self.label_count:
            raise LabelError(f"{len(names)} label names for {self.label_count} labels")
        object.__setattr__(self, "images", _frozen(images))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "frame", frame)
        object.__setattr__(self, "is_poison", _frozen(flags))
        object.__setattr__(self, "label_names", tuple(names))

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[tuple[Image, int]],
        label_count: int,
        frame: Shape | None = None,
        is_poison: Sequence[bool] | None = None,
        label_names: tuple[str, ...] = (),
    ) -> "LabeledDataset":
        if frame is None:
            if not samples:
                raise EmptyDatasetError(
                    "cannot infer the frame of an empty sample list"
                )
            frame = samples[0][0].shape
        images = (
            np.stack([img.pixels for img, _ in samples])
            if samples
            else np.zeros((0, *frame), dtype=np.uint8)
        )
        labels = np.array([label for _, label in samples], dtype=np.int64)
        flags = None if is_poison is None else np.array(is_poison, dtype=bool)
        return cls(images, labels, label_count, frame, flags, label_names)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def image(self, index: int) -> Image:
        return Image(self.images[index])

    def samples(self) -> list[tuple[Image, int]]:
        return [(self.image(i), int(self.labels[i])) for i in range(len(self))]

    def images_list(self) -> list[Image]:
        return [self.image(i) for i in range(len(self))]

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.label_count)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "LabeledDataset":
        index = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.images[index],
            self.labels[index],
            self.label_count,
            self.frame,
            self.is_poison[index],  # type: ignore[index]
            self.label_names,
        )

    @cached_property
    def identities(self) -> tuple[str, ...]:
        """Content hash (pixels + label) of every sample."""
        return tuple(
            sample_identity(self.images[i], int(self.labels[i]))
            for i in range(len(self))
        )

    @cached_property
    def content_hash(self) -> str:
        return combined_hash(self.identities)

    def to_float_matrix(self) -> np.ndarray:
        """(N, H*W*C) float64 copy of the pixels in raw [0, 255] space."""
        return self.images.reshape(len(self), -1).astype(np.float64)


@dataclass(frozen=True)
class SplitBundle:
    """The three pairwise-disjoint sets an experiment works with."""

    train: LabeledDataset
    attacker_pool: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True, eq=False)
class PoisonedDataset:
    """
    Pristine training set D plus injected poisoning samples.

    Attributes:
        base: The pristine training set D.
        poisons: The injected samples.
    """

    base: LabeledDataset
    poisons: tuple[PoisoningSample, ...]

    @property
    def N(self) -> int:  # noqa: N802 - matches the notation used in reports
        return len(self.base)

    @property
    def n(self) -> int:
        return len(self.poisons)

    @property
    def poison_ratio(self) -> float:
        return self.n / self.N if self.N else float("inf")

    @cached_property
    def combined(self) -> LabeledDataset:
        """D union poisons as one dataset; poisons follow the pristine samples."""
        poison_images = np.stack([p.instance.pixels for p in self.poisons])
        poison_labels = np.array([p.label for p in self.poisons], dtype=np.int64)
        return LabeledDataset(
            np.concatenate([self.base.images, poison_images]),
            np.concatenate([self.base.labels, poison_labels]),
            self.base.label_count,
            self.base.frame,
            np.concatenate(
                [self.base.is_poison, np.ones(self.n, dtype=bool)]  # type: ignore[list-item]
            ),
            self.base.label_names,
        )


TrainingData = LabeledDataset | PoisonedDataset


def as_labeled(data: TrainingData) -> LabeledDataset:
    """The flat labelled view of a pristine or poisoned dataset."""
    return data.combined if isinstance(data, PoisonedDataset) else data


def filter_infrequent(ds: LabeledDataset, min_count: int) -> LabeledDataset:
    """
    Drop labels with fewer than ``min_count`` samples and re-index densely.

    The surviving labels keep their original names, which records the mapping.

    Raises:
        InvalidParameterError: If ``min_count < 1``.
        EmptyDatasetError: If no sample survives.
    """
    if min_count < 1:
        raise InvalidParameterError(f"min_count must be >= 1, got {min_count}")
    counts = ds.label_counts()
    kept_labels = np.flatnonzero(counts >= min_count)
    if kept_labels.size == 0:
        raise EmptyDatasetError(f"no label has at least {min_count} samples")
    remap = np.full(ds.label_count, -1, dtype=np.int64)
    remap[kept_labels] = np.arange(kept_labels.size)
    keep = remap[ds.labels] >= 0
    removed = ds.label_count - kept_labels.size
    if removed:
        logger.info(f"Filtered {removed} infrequent labels (< {min_count} samples)")
    return LabeledDataset(
        ds.images[keep],
        remap[ds.labels[keep]],
        int(kept_labels.size),
        ds.frame,
        ds.is_poison[keep],  # type: ignore[index]
        tuple(ds.label_names[i] for i in kept_labels),
    )


def distinct_image_indices(ds: LabeledDataset) -> np.ndarray:
    """Index of the first sample of every distinct pixel content, ascending."""
    seen: set[str] = set()
    keep: list[int] = []
    for index in range(len(ds)):
        identity = image_identity(ds.images[index])
        if identity not in seen:
            seen.add(identity)
            keep.append(index)
    return np.array(keep, dtype=np.int64)


def split_three_way(
    ds: LabeledDataset, test_per_label: int, pool_per_label: int, rng: RngStream
) -> SplitBundle:
    """
    Per label: ``test_per_label`` samples to test, ``pool_per_label`` to the
    attacker pool, the rest to train.

    Samples repeating the pixels of an earlier sample are dropped first, so no
    image can land in two sets.

    Raises:
        SplitError: Naming the first label with fewer than
            ``test_per_label + pool_per_label + 1`` samples.
    """
    if test_per_label < 0 or pool_per_label < 0:
        raise InvalidParameterError("per-label split sizes must be non-negative")
    needed = test_per_label + pool_per_label + 1
    distinct = distinct_image_indices(ds)
    if distinct.size < len(ds):
        logger.warning(
            f"Dropped {len(ds) - distinct.size} duplicate images before splitting"
        )
    train_idx: list[np.ndarray] = []
    pool_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for label in range(ds.label_count):
        members = distinct[ds.labels[distinct] == label]
        if members.size < needed:
            raise SplitError(
                f"label {label} ('{ds.label_names[label]}') has {members.size} samples, "
                f"split needs {needed}"
            )
        order = rng.child("split", label).generator().permutation(members)
        test_idx.append(np.sort(order[:test_per_label]))
        pool_idx.append(
            np.sort(order[test_per_label : test_per_label + pool_per_label])
        )
        train_idx.append(np.sort(order[test_per_label + pool_per_label :]))
    return SplitBundle(
        train=ds.subset(np.concatenate(train_idx)),
        attacker_pool=ds.subset(np.concatenate(pool_idx)),
        test=ds.subset(np.concatenate(test_idx)),
    )


def balanced_epoch_indices(
    ds: LabeledDataset, per_label: int, rng: RngStream
) -> np.ndarray:
    """
    Shuffled sample indices holding exactly ``per_label`` entries per present label.

    Labels with at least ``per_label`` samples are sampled without replacement,
    smaller labels with replacement.
    """
    if per_label < 1:
        raise InvalidParameterError(f"per_label must be >= 1, got {per_label}")
    generator = rng.generator()
    chosen: list[np.ndarray] = []
    for label in range(ds.label_count):
        members = np.flatnonzero(ds.labels == label)
        if members.size == 0:
            continue
        replace = members.size < per_label
        chosen.append(generator.choice(members, size=per_label, replace=replace))
    if not chosen:
        return np.zeros(0, dtype=np.int64)
    return generator.permutation(np.concatenate(chosen))


def balanced_epoch_sample(
    train: TrainingData, per_label: int, rng: RngStream
) -> list[tuple[Image, int]]:
    """One epoch of class-balanced samples; poisons count as members of their label."""
    flat = as_labeled(train)
    return [
        (flat.image(int(i)), int(flat.labels[i]))
        for i in balanced_epoch_indices(flat, per_label, rng)
    ]


def assemble_poisoned(
    train: LabeledDataset, poisons: Sequence[PoisoningSample]
) -> PoisonedDataset:
    """
    Build D^poison = D union {(x_i^p, y_i^p)}.

    Raises:
        InvalidParameterError: If ``poisons`` is empty.
        LabelError: If a poison label is outside the label space.
        ShapeError: If a poison does not share the dataset frame.
    """
    if not poisons:
        raise InvalidParameterError("at least one poisoning sample is required")
    for sample in poisons:
        if not 0 <= sample.label < train.label_count:
            raise LabelError(
                f"poison label {sample.label} outside [0, {train.label_count})"
            )
        if sample.instance.shape != train.frame:
            raise ShapeError(
                f"poison shape {sample.instance.shape} != frame {train.frame}"
            )
    poisoned = PoisonedDataset(base=train, poisons=tuple(poisons))
    if poisoned.poison_ratio > POISON_RATIO_WARNING:
        logger.warning(
            f"Poison ratio n/N = {poisoned.n}/{poisoned.N} = {poisoned.poison_ratio:.2%} "
            f"exceeds the n << N threat model ({POISON_RATIO_WARNING:.0%})"
        )
    return poisoned


def _shift_edge(canvas: np.ndarray, dy: int, dx: int) -> np.ndarray:
    height, width = canvas.shape[:2]
    pad = SYNTH_MAX_SHIFT
    padded = np.pad(canvas, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    top, left = pad - dy, pad - dx
    return padded[top : top + height, left : left + width]


def identity_template(label: int, frame: Shape, rng: RngStream) -> np.ndarray:
    """The fixed smooth-blob template of one synthetic identity."""
    return render_blobs(frame, rng.child("template", label).generator(), count=6)


def synth_generate(
    num_labels: int,
    per_label: int,
    frame: Shape,
    rng: RngStream,
    template_offset: int = 0,
) -> LabeledDataset:
    """
    Procedural desk-scale stand-in for a face corpus.

    Each label is an identity: a template of smooth blobs seeded by its id plus
    per-sample jitter (brightness, translation of at most 2 px, Gaussian pixel
    noise with sigma 8).

    Args:
        num_labels: Number of identities (>= 2).
        per_label: Samples per identity.
        frame: (H, W, C) of every image.
        rng: Random stream.
        template_offset: Shifts template ids, producing identities disjoint
            from those of a dataset generated with offset 0.
    """
    if num_labels < 2:
        raise InvalidParameterError(f"num_labels must be >= 2, got {num_labels}")
    if per_label < 1:
        raise InvalidParameterError(f"per_label must be >= 1, got {per_label}")
    images = np.zeros((num_labels * per_label, *frame), dtype=np.uint8)
    labels = np.repeat(np.arange(num_labels, dtype=np.int64), per_label)
    for label in range(num_labels):
        identity = label + template_offset
        template = identity_template(identity, frame, rng)
        for j in range(per_label):
            generator = rng.child("sample", identity, j).generator()
            brightness = generator.uniform(-SYNTH_BRIGHTNESS, SYNTH_BRIGHTNESS)
            dy, dx = generator.integers(-SYNTH_MAX_SHIFT, SYNTH_MAX_SHIFT + 1, size=2)
            noise = generator.normal(0.0, SYNTH_NOISE_SIGMA, size=frame)
            jittered = _shift_edge(template, int(dy), int(dx)) + brightness + noise
            images[label * per_label + j] = clip(jittered).pixels
    names = tuple(f"identity-{label + template_offset}" for label in range(num_labels))
    return LabeledDataset(images, labels, num_labels, frame, label_names=names)


def subject_pools(ds: LabeledDataset) -> list[list[Image]]:
    """Group a dataset's images by label, one list per subject."""
    return [
        [ds.image(int(i)) for i in np.flatnonzero(ds.labels == label)]
        for label in range(ds.label_count)
    ]


def leave_one_out_pools(
    pools: Sequence[Sequence[Image]], held_out: int
) -> tuple[list[Image], list[Image]]:
    """
    Split per-subject images into (poison source, eval source) for one held-out subject.

    Raises:
        ProtocolError: With fewer than two subjects or an invalid index.
    """
    if len(pools) < 2:
        raise ProtocolError("leave-one-out needs at least two subjects")
    if not 0 <= held_out < len(pools):
        raise ProtocolError(f"held-out subject {held_out} outside [0, {len(pools)})")
    poison_source = [
        img for i, pool in enumerate(pools) if i != held_out for img in pool
    ]
    return poison_source, list(pools[held_out])


# Loaders ----------------------------------------------------------------------


def _read_idx(path: Path) -> np.ndarray:
    payload = path.read_bytes()
    if len(payload) < 4 or payload[0] != 0 or payload[1] != 0:
        raise FormatError(f"{path}: not an IDX file")
    data_type, ndim = payload[2], payload[3]
    if data_type != IDX_UBYTE_TYPE:
        raise FormatError(f"{path}: only unsigned-byte IDX data is supported")
    header_size = 4 + 4 * ndim
    shape = struct.unpack(">" + "I" * ndim, payload[4:header_size])
    body = np.frombuffer(payload, dtype=np.uint8, offset=header_size)
    if body.size != int(np.prod(shape)):
        raise FormatError(
            f"{path}: expected {int(np.prod(shape))} values, found {body.size}"
        )
    return body.reshape(shape)


def load_idx(images_path: str | Path, labels_path: str | Path) -> LabeledDataset:
    """Load an IDX image/label pair (e.g. MNIST) as a single-channel dataset."""
    images = _read_idx(Path(images_path))
    labels = _read_idx(Path(labels_path)).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"IDX shapes {images.shape} and {labels.shape} do not pair up"
        )
    frame = (int(images.shape[1]), int(images.shape[2]), 1)
    return LabeledDataset(images[:, :, :, None], labels, int(labels.max()) + 1, frame)


def load_png_tree(root: str | Path, channels: int | None = None) -> LabeledDataset:
    """
    Load ``root/<label>/<name>.png``; label ids follow sorted directory names.

    Raises:
        EmptyDatasetError: If no PNG is found.
        ShapeError: If images disagree in shape.
    """
    base = Path(root)
    label_dirs = sorted(p for p in base.iterdir() if p.is_dir())
    samples: list[tuple[Image, int]] = []
    for label, label_dir in enumerate(label_dirs):
        for png in sorted(label_dir.glob("*.png")):
            img = read_png(png, channels=channels)
            if channels is None:
                channels = img.channels
            samples.append((img, label))
    if not samples:
        raise EmptyDatasetError(f"no PNG images under {base}")
    frame = samples[0][0].shape
    for img, _ in samples:
        if img.shape != frame:
            raise ShapeError(f"mixed image shapes under {base}: {img.shape} vs {frame}")
    return LabeledDataset.from_samples(
        samples, len(label_dirs), frame, label_names=tuple(d.name for d in label_dirs)
    )


def write_png_tree(ds: LabeledDataset, root: str | Path) -> None:
    """Write a dataset in the ``root/<label>/<index>.png`` layout."""
    base = Path(root)
    for name in ds.label_names:
        (base / name).mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        name = ds.label_names[int(ds.labels[i])]
        write_png(ds.image(i), base / name / f"{i:06d}.png")


def _set_summary(ds: LabeledDataset) -> dict[str, Any]:
    return {
        "count": len(ds),
        "per_label": ds.label_counts().tolist(),
        "poisons": int(ds.is_poison.sum()),  # type: ignore[union-attr]
        "hash": ds.content_hash,
        "identities": list(ds.identities),
    }


def dataset_manifest(sets: dict[str, LabeledDataset]) -> dict[str, Any]:
    """Counts, hashes and split assignment of named datasets."""
    first = next(iter(sets.values()))
    return {
        "frame": list(first.frame),
        "label_count": first.label_count,
        "label_names": list(first.label_names),
        "sets": {name: _set_summary(ds) for name, ds in sets.items()},
    }


def write_manifest(
    sets: SplitBundle | dict[str, LabeledDataset], path: str | Path
) -> None:
    """Write a dataset manifest JSON for a split bundle or any named sets."""
    named = (
        {"train": sets.train, "attacker_pool": sets.attacker_pool, "test": sets.test}
        if isinstance(sets, SplitBundle)
        else sets
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(dataset_manifest(named), indent=2, sort_keys=True))
