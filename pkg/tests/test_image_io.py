"""Tests for PNG and raw IMG1 image files."""

from pathlib import Path

import numpy as np
import pytest

from core.errors import FormatError
from core.image_io import (
    decode_raw,
    encode_raw,
    read_mask_png,
    read_png,
    read_raw,
    write_mask_png,
    write_png,
    write_raw,
)
from core.imaging import Image


class TestRawFormat:
    """Test cases for the IMG1 format."""

    def test_header_layout(self, random_image: Image) -> None:
        payload = encode_raw(random_image)
        assert payload[:4] == b"IMG1"
        assert int.from_bytes(payload[4:6], "little") == random_image.height
        assert int.from_bytes(payload[6:8], "little") == random_image.width
        assert payload[8] == random_image.channels
        assert payload[9] == 0
        assert len(payload) == 10 + random_image.pixels.size

    def test_file_round_trip(self, random_image: Image, tmp_path: Path) -> None:
        write_raw(random_image, tmp_path / "img.raw")
        assert read_raw(tmp_path / "img.raw") == random_image

    def test_bad_magic(self, random_image: Image) -> None:
        payload = b"NOPE" + encode_raw(random_image)[4:]
        with pytest.raises(FormatError, match="magic"):
            decode_raw(payload)

    def test_truncated_body(self, random_image: Image) -> None:
        with pytest.raises(FormatError):
            decode_raw(encode_raw(random_image)[:-1])

    def test_shorter_than_header(self) -> None:
        with pytest.raises(FormatError):
            decode_raw(b"IMG1")


class TestPng:
    """Test cases for PNG files."""

    def test_rgb_round_trip(self, random_image: Image, tmp_path: Path) -> None:
        write_png(random_image, tmp_path / "img.png")
        assert read_png(tmp_path / "img.png") == random_image

    def test_grayscale_stays_single_channel(self, tmp_path: Path) -> None:
        img = Image(np.arange(16, dtype=np.uint8).reshape(4, 4, 1))
        write_png(img, tmp_path / "gray.png")
        loaded = read_png(tmp_path / "gray.png")
        assert loaded.channels == 1
        assert loaded == img

    def test_mask_round_trip(self, tmp_path: Path) -> None:
        mask = np.array([[True, False, True], [False, False, True]])
        write_mask_png(mask, tmp_path / "mask.png")
        assert np.array_equal(read_mask_png(tmp_path / "mask.png"), mask)
