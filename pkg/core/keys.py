"""
Backdoor keys, backdoor-instance generation and pattern injection.

Two families of keys are supported:

* input-instance keys: a single image ``k``; backdoor instances are
  ``clip(k + delta)`` with ``delta ~ U[-bound, bound]`` per channel.
* pattern keys: an image ``k`` with a transparency mask ``R(k)``, combined with
  benign images by blending, accessory overlay, or both.

Blending uses ``x + alpha * (k - x)``, which equals ``alpha*k + (1-alpha)*x`` and
is monotone in ``alpha``. Every strategy rounds exactly once, through
``imaging.clip``, which keeps the reduction identities between strategies
bit-exact.
"""

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from core.constants import (
    DEFAULT_BACKDOOR_COUNT,
    DEFAULT_NOISE_BOUND,
    EYE_REGION_ROW_FRACTION,
    MAX_COLLISION_REDRAWS,
    SCALE_FRACTIONS,
)
from core.errors import (
    InsufficientPoolError,
    InvalidParameterError,
    InvalidWrongKeyError,
    ShapeError,
)
from core.image_io import read_mask_png, read_png, write_mask_png, write_png
from core.imaging import (
    Image,
    Shape,
    clip,
    place_at,
    render_blobs,
    resize_array_nearest,
    resize_nearest,
    uniform_noise,
)
from core.rng import RngStream

logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    """Poisoning strategies."""

    INPUT_INSTANCE = "input-instance"
    BLENDED = "blended"
    ACCESSORY = "accessory"
    BLENDED_ACCESSORY = "blended-accessory"

    @property
    def uses_pattern(self) -> bool:
        return self is not Strategy.INPUT_INSTANCE

    @property
    def uses_alpha(self) -> bool:
        return self in (Strategy.BLENDED, Strategy.BLENDED_ACCESSORY)


@dataclass(frozen=True, eq=False)
class InputInstanceKey:
    """
    A single input instance used as the key.

    Attributes:
        key_image: The key k.
        noise_bound: Half-width of the uniform per-channel noise.
        source_label: Ground-truth label of k when known (needed for wrong keys).
    """

    key_image: Image
    noise_bound: float = DEFAULT_NOISE_BOUND
    source_label: int | None = None

    def __post_init__(self) -> None:
        if self.noise_bound < 0:
            raise InvalidParameterError(
                f"noise_bound must be >= 0, got {self.noise_bound}"
            )

    def same_as(self, other: object) -> bool:
        return isinstance(other, InputInstanceKey) and self.key_image == other.key_image


def scale_presets_for(frame: Shape) -> dict[str, tuple[int, int]]:
    """Pixel sizes of the small/medium/large accessory presets for a frame."""
    height, width, _ = frame
    return {
        name: (max(1, round(height * fh)), max(1, round(width * fw)))
        for name, (fh, fw) in SCALE_FRACTIONS.items()
    }


def default_anchor(frame: Shape, size: tuple[int, int]) -> tuple[int, int]:
    """Top-left anchor centring a patch of ``size`` on the frame's eye region."""
    height, width, _ = frame
    patch_height, patch_width = size
    row = round(height * EYE_REGION_ROW_FRACTION) - patch_height // 2
    row = min(max(row, 0), height - patch_height)
    col = max((width - patch_width) // 2, 0)
    return row, col


@dataclass(frozen=True, eq=False)
class PatternKey:
    """
    A key pattern with its transparent region.

    Attributes:
        pattern: The key pattern k at its native resolution.
        transparent_mask: H x W booleans, True on R(k) (where x shows through).
        scale: Preset name, or None to place the pattern at native size.
        anchor: (row, col) of the placed pattern within the full frame.
        scale_presets: Preset name -> (height, width) in pixels.
        name: Free-form label used in reports (e.g. ``"sunglasses"``).
    """

    pattern: Image
    transparent_mask: np.ndarray
    scale: str | None = None
    anchor: tuple[int, int] = (0, 0)
    scale_presets: dict[str, tuple[int, int]] = field(default_factory=dict)
    name: str = "pattern"

    def __post_init__(self) -> None:
        mask = np.asarray(self.transparent_mask, dtype=bool)
        if mask.shape != (self.pattern.height, self.pattern.width):
            raise ShapeError(
                f"mask {mask.shape} does not match pattern "
                f"{self.pattern.height}x{self.pattern.width}"
            )
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "transparent_mask", mask)
        object.__setattr__(self, "anchor", (int(self.anchor[0]), int(self.anchor[1])))
        if self.scale is not None and self.scale not in self.scale_presets:
            raise InvalidParameterError(f"unknown scale preset '{self.scale}'")

    @classmethod
    def full_frame(cls, pattern: Image, name: str = "pattern") -> "PatternKey":
        """A fully opaque pattern covering the whole frame (Blended Injection)."""
        mask = np.zeros((pattern.height, pattern.width), dtype=bool)
        return cls(pattern=pattern, transparent_mask=mask, name=name)

    @property
    def is_full_frame(self) -> bool:
        return (
            self.scale is None
            and self.anchor == (0, 0)
            and not self.transparent_mask.any()
        )

    def placed_size(self) -> tuple[int, int]:
        if self.scale is None:
            return self.pattern.height, self.pattern.width
        return self.scale_presets[self.scale]

    def placed(self, frame: Shape) -> tuple[np.ndarray, np.ndarray]:
        """
        Resize and position the pattern inside a frame.

        Returns:
            (overlay, opaque): H x W x C uint8 overlay and the H x W boolean mask
            of opaque footprint pixels.

        Raises:
            PlacementError: If the placed pattern does not fit the frame.
        """
        pattern, mask = self.pattern, self.transparent_mask
        if self.scale is not None:
            size = self.scale_presets[self.scale]
            pattern = resize_nearest(pattern, size)
            mask = resize_array_nearest(mask, size)
        overlay, coverage = place_at(frame, pattern, self.anchor)
        transparent = np.ones(coverage.shape, dtype=bool)
        transparent[coverage] = mask.reshape(-1)
        return overlay.pixels, coverage & ~transparent

    def same_as(self, other: object) -> bool:
        return (
            isinstance(other, PatternKey)
            and self.pattern == other.pattern
            and np.array_equal(self.transparent_mask, other.transparent_mask)
            and self.scale == other.scale
            and self.anchor == other.anchor
        )


Key = InputInstanceKey | PatternKey


@dataclass(frozen=True, eq=False)
class BackdoorSpec:
    """
    One attack's full definition: target label, key, strategy and budgets.

    For the input-instance and accessory strategies both alphas are fixed to 1.
    """

    strategy: Strategy
    key: Key
    target_label: int
    alpha_train: float = 1.0
    alpha_test: float = 1.0
    n: int = 1

    def __post_init__(self) -> None:
        strategy = Strategy(self.strategy)
        object.__setattr__(self, "strategy", strategy)
        if self.n < 1:
            raise InvalidParameterError(
                f"poisoning sample count n must be >= 1, got {self.n}"
            )
        if self.target_label < 0:
            raise InvalidParameterError(
                f"target label must be >= 0, got {self.target_label}"
            )
        if strategy.uses_pattern != isinstance(self.key, PatternKey):
            raise InvalidParameterError(
                f"strategy '{strategy.value}' cannot use a {type(self.key).__name__}"
            )
        if strategy is Strategy.BLENDED and isinstance(self.key, PatternKey):
            if not self.key.is_full_frame:
                raise InvalidParameterError(
                    "blended injection needs a full-frame opaque pattern"
                )
        if strategy.uses_alpha:
            _check_alpha(self.alpha_train)
            _check_alpha(self.alpha_test)
        else:
            object.__setattr__(self, "alpha_train", 1.0)
            object.__setattr__(self, "alpha_test", 1.0)


class PoisoningSample(NamedTuple):
    """An attacker-injected (instance, label) pair with its origin."""

    instance: Image
    label: int
    origin: dict[str, Any]

    @property
    def provenance(self) -> str:
        return "poison"


class WrongKeyInstance(NamedTuple):
    """An instance built from a wrong key, with its source's ground truth."""

    instance: Image
    ground_truth: int


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameterError(f"alpha must lie in [0, 1], got {alpha}")


def _mix(pattern: np.ndarray, x: np.ndarray, alpha: float) -> np.ndarray:
    base = x.astype(np.float64)
    return base + alpha * (pattern.astype(np.float64) - base)


def sample_backdoor_instance_rand(key: InputInstanceKey, rng: RngStream) -> Image:
    """Draw one noisy copy of the key: clip(k + delta), delta ~ U[-b, b]."""
    noise = uniform_noise(key.key_image.shape, -key.noise_bound, key.noise_bound, rng)
    return clip(key.key_image.to_float() + noise)


def blend_inject(key: PatternKey, x: Image, alpha: float) -> Image:
    """
    Blended Injection: clip(alpha * k + (1 - alpha) * x) per pixel.

    Raises:
        ShapeError: If the pattern is not the same shape as ``x``.
        InvalidParameterError: If alpha is outside [0, 1].
    """
    _check_alpha(alpha)
    if key.pattern.shape != x.shape:
        raise ShapeError(f"pattern {key.pattern.shape} does not match image {x.shape}")
    return clip(_mix(key.pattern.pixels, x.pixels, alpha))


def accessory_inject(key: PatternKey, x: Image) -> Image:
    """Accessory Injection: pattern pixels on the opaque footprint, x elsewhere."""
    overlay, opaque = key.placed(x.shape)
    return Image(np.where(opaque[:, :, None], overlay, x.pixels))


def blended_accessory_inject(key: PatternKey, x: Image, alpha: float) -> Image:
    """Blended accessory injection: blend with ratio alpha on the opaque footprint."""
    _check_alpha(alpha)
    overlay, opaque = key.placed(x.shape)
    mixed = _mix(overlay, x.pixels, alpha)
    return clip(np.where(opaque[:, :, None], mixed, x.pixels.astype(np.float64)))


def inject(strategy: Strategy, key: PatternKey, x: Image, alpha: float) -> Image:
    """Apply the pattern-injection function of ``strategy``."""
    if strategy is Strategy.BLENDED:
        return blend_inject(key, x, alpha)
    if strategy is Strategy.ACCESSORY:
        return accessory_inject(key, x)
    if strategy is Strategy.BLENDED_ACCESSORY:
        return blended_accessory_inject(key, x, alpha)
    raise InvalidParameterError(f"strategy '{strategy.value}' has no pattern injection")


def generate_poisons(
    spec: BackdoorSpec, benign_pool: Sequence[Image], rng: RngStream
) -> list[PoisoningSample]:
    """
    Produce the n poisoning samples of an attack, all labelled with the target.

    Input-instance attacks draw n independent noisy copies of k;
    pattern attacks inject the key into n pool images sampled without
    replacement, using alpha_train.

    Raises:
        InsufficientPoolError: If a pattern attack has fewer than n pool images.
    """
    if isinstance(spec.key, InputInstanceKey):
        return [
            PoisoningSample(
                instance=sample_backdoor_instance_rand(
                    spec.key, rng.child("poison", i)
                ),
                label=spec.target_label,
                origin={"strategy": spec.strategy.value, "source": "key", "draw": i},
            )
            for i in range(spec.n)
        ]
    if len(benign_pool) < spec.n:
        raise InsufficientPoolError(
            f"pattern attack needs {spec.n} pool images, pool has {len(benign_pool)}"
        )
    picks = (
        rng.child("pool")
        .generator()
        .choice(len(benign_pool), size=spec.n, replace=False)
    )
    return [
        PoisoningSample(
            instance=inject(
                spec.strategy, spec.key, benign_pool[int(index)], spec.alpha_train
            ),
            label=spec.target_label,
            origin={
                "strategy": spec.strategy.value,
                "source": "pool",
                "pool_index": int(index),
                "alpha": spec.alpha_train,
            },
        )
        for index in picks
    ]


def generate_backdoor_instances(
    spec: BackdoorSpec,
    eval_pool: Sequence[Image],
    rng: RngStream,
    count: int = DEFAULT_BACKDOOR_COUNT,
    avoid: Sequence[Image] = (),
    include_key: bool = False,
) -> list[Image]:
    """
    Build the backdoor instances an attack is scored on.

    Args:
        spec: The attack.
        eval_pool: Benign images to inject (pattern strategies only).
        rng: Random stream for noisy key draws.
        count: Number of noisy key draws (input-instance strategy only).
        avoid: Poisoning instances that no draw may reproduce bit-for-bit.
        include_key: Also score the key image itself (input-instance only).

    Returns:
        Input-instance: ``count`` fresh draws (plus k when requested).
        Pattern: every eval_pool image injected with alpha_test.
    """
    if isinstance(spec.key, InputInstanceKey):
        forbidden = {img.tobytes() for img in avoid}
        instances: list[Image] = [spec.key.key_image] if include_key else []
        for i in range(count):
            draw = sample_backdoor_instance_rand(spec.key, rng.child("backdoor", i))
            attempt = 0
            while draw.tobytes() in forbidden and attempt < MAX_COLLISION_REDRAWS:
                attempt += 1
                logger.warning(f"Backdoor draw {i} collided with a poison; redrawing")
                draw = sample_backdoor_instance_rand(
                    spec.key, rng.child("backdoor", i, attempt)
                )
            instances.append(draw)
        return instances
    return [inject(spec.strategy, spec.key, x, spec.alpha_test) for x in eval_pool]


def wrong_key_instances(
    true_spec: BackdoorSpec,
    wrong_key: Key,
    eval_pool: Sequence[tuple[Image, int]],
    rng: RngStream,
    count: int = DEFAULT_BACKDOOR_COUNT,
) -> list[WrongKeyInstance]:
    """
    Build instances exactly like the true-key evaluation, but from a wrong key.

    Pattern strategies inject the wrong pattern into every eval image whose
    ground truth differs from the target; input-instance strategies draw
    ``count`` instances around the wrong key image, whose label must be known.

    Raises:
        InvalidWrongKeyError: If the wrong key equals the true key, or no
            instance with a non-target ground truth can be built.
    """
    if true_spec.key.same_as(wrong_key):
        raise InvalidWrongKeyError("wrong key is identical to the true key")
    try:
        wrong_spec = replace(true_spec, key=wrong_key)
    except InvalidParameterError as exc:
        raise InvalidWrongKeyError(str(exc)) from exc
    target = true_spec.target_label
    if isinstance(wrong_key, InputInstanceKey):
        if wrong_key.source_label is None or wrong_key.source_label == target:
            raise InvalidWrongKeyError(
                "wrong instance key needs a known ground truth different from the target"
            )
        draws = generate_backdoor_instances(wrong_spec, (), rng, count=count)
        return [WrongKeyInstance(img, wrong_key.source_label) for img in draws]
    kept = [(img, label) for img, label in eval_pool if label != target]
    if not kept:
        raise InvalidWrongKeyError(
            "no eval instance has a ground truth other than the target"
        )
    injected = generate_backdoor_instances(wrong_spec, [img for img, _ in kept], rng)
    return [
        WrongKeyInstance(img, label)
        for img, (_, label) in zip(injected, kept, strict=True)
    ]


# Key catalogue ----------------------------------------------------------------


def random_pattern(shape: Shape, rng: RngStream, name: str = "random") -> PatternKey:
    """Full-frame key whose pixels are uniform on the integers 0..255."""
    pixels = rng.generator().integers(0, 256, size=shape, dtype=np.uint8)
    return PatternKey.full_frame(Image(pixels), name=name)


def cartoon_pattern(shape: Shape, rng: RngStream, name: str = "cartoon") -> PatternKey:
    """Full-frame smooth, high-contrast picture built from a few bold blobs."""
    canvas = render_blobs(shape, rng.generator(), count=5, contrast=2.5)
    return PatternKey.full_frame(clip(canvas), name=name)


_GLASSES_COLOURS: dict[str, tuple[int, int, int]] = {
    "reading": (18, 18, 18),
    "sunglasses": (112, 38, 140),
}


def glasses_pattern(
    style: str,
    frame: Shape,
    scale: str = "medium",
    colour: tuple[int, int, int] | None = None,
) -> PatternKey:
    """
    Procedural eyewear key placed on the frame's eye region.

    ``reading`` is a thin opaque frame with a top bar and transparent lenses;
    ``sunglasses`` has opaque tinted lenses and so covers a larger area. Pixels
    outside frame and lenses are transparent.
    """
    if style not in _GLASSES_COLOURS:
        raise InvalidParameterError(f"unknown glasses style '{style}'")
    presets = scale_presets_for(frame)
    height, width = presets["large"]
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    center_row = (height - 1) / 2.0
    radius_row = max(height * 0.45, 1.0)
    radius_col = max(width * 0.21, 1.0)
    opaque = np.zeros((height, width), dtype=bool)
    for center_col in (width * 0.27, width * 0.73):
        dist = ((rows - center_row) / radius_row) ** 2 + (
            (cols - center_col) / radius_col
        ) ** 2
        if style == "sunglasses":
            opaque |= dist <= 1.0
        else:
            opaque |= (dist <= 1.0) & (dist >= 0.55)
    bar_rows = max(1, height // 6)
    left, right = int(width * 0.06), int(np.ceil(width * 0.94))
    opaque[:bar_rows, left:right] = True
    bridge_row = int(center_row)
    bridge_cols = slice(int(width * 0.45), int(np.ceil(width * 0.55)))
    opaque[max(bridge_row - 1, 0) : bridge_row + 1, bridge_cols] = True

    rgb = np.array(colour or _GLASSES_COLOURS[style], dtype=np.float64)
    channels = frame[2]
    values = rgb if channels == 3 else np.array([rgb.mean()])
    pattern = np.zeros((height, width, channels), dtype=np.uint8)
    pattern[opaque] = np.round(values).astype(np.uint8)
    return PatternKey(
        pattern=Image(pattern),
        transparent_mask=~opaque,
        scale=scale,
        anchor=default_anchor(frame, presets[scale]),
        scale_presets=presets,
        name=style,
    )


# Serialisation ----------------------------------------------------------------


def save_pattern_key(key: PatternKey, directory: str | Path) -> None:
    """Write ``pattern.png``, ``mask.png`` (255 = transparent) and ``key.json``."""
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    write_png(key.pattern, target / "pattern.png")
    write_mask_png(key.transparent_mask, target / "mask.png")
    sidecar = {
        "name": key.name,
        "scale": key.scale,
        "anchor": list(key.anchor),
        "scale_presets": {name: list(size) for name, size in key.scale_presets.items()},
    }
    (target / "key.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_pattern_key(directory: str | Path) -> PatternKey:
    source = Path(directory)
    sidecar = json.loads((source / "key.json").read_text())
    return PatternKey(
        pattern=read_png(source / "pattern.png"),
        transparent_mask=read_mask_png(source / "mask.png"),
        scale=sidecar.get("scale"),
        anchor=tuple(sidecar.get("anchor", (0, 0))),  # type: ignore[arg-type]
        scale_presets={
            k: tuple(v)  # type: ignore[misc]
            for k, v in sidecar.get("scale_presets", {}).items()
        },
        name=sidecar.get("name", "pattern"),
    )


def spec_to_dict(spec: BackdoorSpec) -> dict[str, Any]:
    """JSON-ready description of a spec; the key itself is stored beside it."""
    key_info: dict[str, Any]
    if isinstance(spec.key, InputInstanceKey):
        key_info = {
            "kind": "instance",
            "noise_bound": spec.key.noise_bound,
            "source_label": spec.key.source_label,
        }
    else:
        key_info = {"kind": "pattern", "name": spec.key.name, "scale": spec.key.scale}
    return {
        "strategy": spec.strategy.value,
        "target_label": spec.target_label,
        "alpha_train": spec.alpha_train,
        "alpha_test": spec.alpha_test,
        "n": spec.n,
        "key": key_info,
    }


def save_spec(spec: BackdoorSpec, directory: str | Path) -> None:
    """Write ``spec.json`` plus the key files into ``directory``."""
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    if isinstance(spec.key, InputInstanceKey):
        write_png(spec.key.key_image, target / "key.png")
    else:
        save_pattern_key(spec.key, target / "key")
    (target / "spec.json").write_text(
        json.dumps(spec_to_dict(spec), indent=2, sort_keys=True)
    )


def load_spec(directory: str | Path) -> BackdoorSpec:
    """Inverse of ``save_spec``."""
    source = Path(directory)
    data = json.loads((source / "spec.json").read_text())
    key_info = data["key"]
    key: Key
    if key_info["kind"] == "instance":
        key = InputInstanceKey(
            key_image=read_png(source / "key.png"),
            noise_bound=float(key_info["noise_bound"]),
            source_label=key_info.get("source_label"),
        )
    else:
        key = load_pattern_key(source / "key")
    return spec_from_dict(data, key)


def spec_from_dict(data: dict[str, Any], key: Key) -> BackdoorSpec:
    """Rebuild a spec from ``spec_to_dict`` output and its separately stored key."""
    return BackdoorSpec(
        strategy=Strategy(data["strategy"]),
        key=key,
        target_label=int(data["target_label"]),
        alpha_train=float(data["alpha_train"]),
        alpha_test=float(data["alpha_test"]),
        n=int(data["n"]),
    )
