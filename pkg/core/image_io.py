"""
Lossless image file formats: PNG through Pillow and the raw IMG1 tensor format.

IMG1 layout (little-endian): magic ``b"IMG1"``, u16 height, u16 width,
u8 channels, u8 pad (zero), then H*W*C bytes in row-major order.
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from core.constants import RAW_IMAGE_MAGIC
from core.errors import FormatError
from core.imaging import Image

_RAW_HEADER = struct.Struct("<4sHHBB")


def encode_raw(img: Image) -> bytes:
    """Serialise an Image into IMG1 bytes."""
    header = _RAW_HEADER.pack(RAW_IMAGE_MAGIC, img.height, img.width, img.channels, 0)
    return header + img.tobytes()


def decode_raw(payload: bytes) -> Image:
    """
    Parse IMG1 bytes.

    Raises:
        FormatError: On a wrong magic number or a truncated pixel block.
    """
    if len(payload) < _RAW_HEADER.size:
        raise FormatError("IMG1 payload shorter than its header")
    magic, height, width, channels, _pad = _RAW_HEADER.unpack_from(payload)
    if magic != RAW_IMAGE_MAGIC:
        raise FormatError(f"bad IMG1 magic {magic!r}")
    expected = height * width * channels
    body = payload[_RAW_HEADER.size :]
    if len(body) != expected:
        raise FormatError(f"IMG1 body has {len(body)} bytes, expected {expected}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return Image(pixels.copy())


def write_raw(img: Image, path: str | Path) -> None:
    Path(path).write_bytes(encode_raw(img))


def read_raw(path: str | Path) -> Image:
    return decode_raw(Path(path).read_bytes())


def write_png(img: Image, path: str | Path) -> None:
    """Write an Image as an 8-bit grayscale or RGB PNG."""
    if img.channels == 1:
        pil_image = PILImage.fromarray(img.pixels[:, :, 0])
    else:
        pil_image = PILImage.fromarray(img.pixels)
    pil_image.save(Path(path), format="PNG")


def read_png(path: str | Path, channels: int | None = None) -> Image:
    """
    Read a PNG into an Image.

    Args:
        path: File to read.
        channels: Force 1 (grayscale) or 3 (RGB); by default grayscale files
            stay single-channel and everything else becomes RGB.
    """
    with PILImage.open(Path(path)) as pil_image:
        if channels is None:
            channels = 1 if pil_image.mode in ("L", "1", "I;16") else 3
        converted = pil_image.convert("L" if channels == 1 else "RGB")
        pixels = np.array(converted, dtype=np.uint8)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return Image(pixels)


def write_mask_png(mask: np.ndarray, path: str | Path) -> None:
    """Write a boolean transparency mask: 255 = transparent, 0 = opaque."""
    values = np.where(mask, 255, 0).astype(np.uint8)
    PILImage.fromarray(values).save(Path(path), format="PNG")


def read_mask_png(path: str | Path) -> np.ndarray:
    """Read a transparency mask written by ``write_mask_png``."""
    with PILImage.open(Path(path)) as pil_image:
        values = np.array(pil_image.convert("L"), dtype=np.uint8)
    return values >= 128
