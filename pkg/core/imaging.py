"""
Pixel-grid primitives shared by every injection strategy.

All injection arithmetic happens in the 8-bit [0, 255] domain with float64
intermediates; a single ``clip`` at the end rounds half away from zero and
clamps. Normalisation to [0, 1] happens only inside the training engine.
"""

from dataclasses import dataclass

import numpy as np

from core.constants import PIXEL_MAX, PIXEL_MIN
from core.errors import InvalidRangeError, InvalidSizeError, PlacementError, ShapeError
from core.rng import RngStream

Shape = tuple[int, int, int]


def _check_shape(pixels: np.ndarray) -> None:
    if pixels.ndim != 3:
        raise ShapeError(f"expected an H x W x C array, got {pixels.ndim} dimensions")
    height, width, channels = pixels.shape
    if height < 1 or width < 1:
        raise ShapeError(f"image dimensions must be positive, got {height}x{width}")
    if channels not in (1, 3):
        raise ShapeError(f"channels must be 1 or 3, got {channels}")


@dataclass(frozen=True, eq=False)
class Image:
    """
    An 8-bit H x W x C pixel grid; the carrier of every sample.

    The pixel array is stored read-only so an Image can be shared freely.
    """

    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        _check_shape(pixels)
        if pixels.dtype != np.uint8:
            if pixels.size and (pixels.min() < PIXEL_MIN or pixels.max() > PIXEL_MAX):
                raise InvalidRangeError("pixel values must lie in [0, 255]")
            if np.issubdtype(pixels.dtype, np.floating) and not np.all(
                pixels == np.round(pixels)
            ):
                raise InvalidRangeError("Image pixels must be integers; use clip()")
            pixels = pixels.astype(np.uint8)
        pixels = np.ascontiguousarray(pixels)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def shape(self) -> Shape:
        return (self.height, self.width, self.channels)

    def to_float(self) -> "FloatImage":
        """Return the float64 view of this image."""
        return FloatImage(self.pixels.astype(np.float64))

    def tobytes(self) -> bytes:
        """Row-major pixel bytes."""
        return self.pixels.tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return self.shape == other.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self) -> int:
        return hash((self.shape, self.pixels.tobytes()))

    def __repr__(self) -> str:
        return f"Image({self.height}x{self.width}x{self.channels})"


@dataclass(frozen=True, eq=False)
class FloatImage:
    """Unbounded float64 intermediate with the shape of an Image."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float64)
        _check_shape(pixels)
        object.__setattr__(self, "pixels", pixels)

    @property
    def shape(self) -> Shape:
        height, width, channels = self.pixels.shape
        return (int(height), int(width), int(channels))

    def __add__(self, other: "FloatImage | NoiseField") -> "FloatImage":
        other_values = other.values if isinstance(other, NoiseField) else other.pixels
        if other_values.shape != self.pixels.shape:
            raise ShapeError(f"cannot add {other_values.shape} to {self.pixels.shape}")
        return FloatImage(self.pixels + other_values)


@dataclass(frozen=True, eq=False)
class NoiseField:
    """Per-pixel real offsets bounded by [lo, hi]."""

    values: np.ndarray
    lo: float
    hi: float

    @property
    def shape(self) -> Shape:
        height, width, channels = self.values.shape
        return (int(height), int(width), int(channels))


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, ties away from zero (127.5 -> 128, -0.5 -> -1)."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def clip(img: FloatImage | np.ndarray) -> Image:
    """
    Round half away from zero, then clamp every channel value to [0, 255].

    Args:
        img: Float image, or a raw H x W x C float array.

    Returns:
        Image: The clipped 8-bit image with the same shape.
    """
    values = img.pixels if isinstance(img, FloatImage) else np.asarray(img, np.float64)
    clamped = np.clip(round_half_away(values), PIXEL_MIN, PIXEL_MAX)
    return Image(clamped.astype(np.uint8))


def uniform_noise(shape: Shape, lo: float, hi: float, rng: RngStream) -> NoiseField:
    """
    Draw an i.i.d. uniform noise field on [lo, hi].

    Raises:
        InvalidRangeError: If ``lo > hi``.
    """
    if lo > hi:
        raise InvalidRangeError(f"noise range is empty: lo={lo} > hi={hi}")
    if lo == hi:
        values = np.full(shape, float(lo), dtype=np.float64)
    else:
        values = rng.generator().uniform(lo, hi, size=shape)
    return NoiseField(values=values, lo=float(lo), hi=float(hi))


def _nearest_indices(source: int, target: int) -> np.ndarray:
    return (np.arange(target, dtype=np.int64) * source) // target


def resize_array_nearest(array: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """
    Nearest-neighbour resampling of the two leading axes of ``array``.

    Output element (i, j) copies source element (floor(i*H/H'), floor(j*W/W')),
    so boolean masks stay boolean.
    """
    new_height, new_width = target
    if new_height < 1 or new_width < 1:
        raise InvalidSizeError(f"target size must be positive, got {target}")
    rows = _nearest_indices(array.shape[0], new_height)
    cols = _nearest_indices(array.shape[1], new_width)
    return array[rows[:, None], cols[None, :]]


def resize_nearest(img: Image, target: tuple[int, int]) -> Image:
    """Nearest-neighbour resize of an Image to ``target`` = (H', W')."""
    return Image(resize_array_nearest(img.pixels, target))


def place_at(
    canvas_shape: Shape, patch: Image, anchor: tuple[int, int]
) -> tuple[Image, np.ndarray]:
    """
    Position ``patch`` inside an all-zero canvas.

    Args:
        canvas_shape: (H, W, C) of the full frame.
        patch: Patch image; its channel count must match the canvas.
        anchor: (row, col) of the patch's top-left pixel.

    Returns:
        The full-frame overlay and the H x W boolean footprint mask.

    Raises:
        PlacementError: If any part of the patch falls outside the canvas.
    """
    height, width, channels = canvas_shape
    row, col = anchor
    if patch.channels != channels:
        raise ShapeError(f"patch has {patch.channels} channels, canvas has {channels}")
    if (
        row < 0
        or col < 0
        or row + patch.height > height
        or col + patch.width > width
    ):
        raise PlacementError(
            f"{patch.height}x{patch.width} patch at {anchor} exceeds "
            f"{height}x{width} canvas"
        )
    overlay = np.zeros(canvas_shape, dtype=np.uint8)
    overlay[row : row + patch.height, col : col + patch.width] = patch.pixels
    coverage = np.zeros((height, width), dtype=bool)
    coverage[row : row + patch.height, col : col + patch.width] = True
    return Image(overlay), coverage


def render_blobs(
    shape: Shape, generator: np.random.Generator, count: int, contrast: float = 1.0
) -> np.ndarray:
    """
    Compose ``count`` soft Gaussian blobs of random colour over a random background.

    Used for synthetic identity templates and cartoon-like key patterns.

    Returns:
        Float64 H x W x C array in [0, 255].
    """
    height, width, channels = shape
    background = generator.uniform(40.0, 215.0, size=channels)
    canvas = np.broadcast_to(background, shape).astype(np.float64).copy()
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    for _ in range(count):
        center_row = generator.uniform(0, height)
        center_col = generator.uniform(0, width)
        radius = generator.uniform(0.12, 0.35) * min(height, width)
        colour = generator.uniform(0.0, 255.0, size=channels)
        weight = np.exp(
            -((rows - center_row) ** 2 + (cols - center_col) ** 2) / (2 * radius**2)
        )
        weight = np.clip(weight * contrast, 0.0, 1.0)[:, :, None]
        canvas = canvas * (1.0 - weight) + colour * weight
    return canvas
