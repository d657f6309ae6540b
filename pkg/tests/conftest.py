"""Shared fixtures: tiny frames and datasets so the fast suite stays fast."""

from typing import Any

import numpy as np
import pytest

from core.datasets import LabeledDataset, synth_generate
from core.imaging import Image
from core.rng import RngStream
from core.training import configure_torch
from harness.experiment import clear_baseline_cache

SMALL_FRAME = (8, 8, 3)


@pytest.fixture(scope="session", autouse=True)
def deterministic_torch() -> None:
    configure_torch()


@pytest.fixture(autouse=True)
def fresh_baseline_cache() -> None:
    clear_baseline_cache()


@pytest.fixture
def stream() -> RngStream:
    return RngStream(1234)


@pytest.fixture
def random_image(stream: RngStream) -> Image:
    pixels = stream.child("image").generator().integers(
        0, 256, SMALL_FRAME, dtype=np.uint8
    )
    return Image(pixels)


@pytest.fixture
def tiny_dataset() -> LabeledDataset:
    """Three synthetic identities, twelve 8x8 RGB samples each."""
    return synth_generate(3, 12, SMALL_FRAME, RngStream(7))


def tiny_config_dict(**sections: Any) -> dict[str, Any]:
    """A config that trains in well under a second per run."""
    data: dict[str, Any] = {
        "name": "tiny",
        "seed": 3,
        "workers": 1,
        "dataset": {
            "num_labels": 3,
            "per_label": 16,
            "frame": list(SMALL_FRAME),
            "test_per_label": 4,
            "pool_per_label": 4,
        },
        "model": {"arch": "softmax"},
        "train": {"epochs": 2, "per_label": 8, "batch": 8},
        "attack": {"n": 2, "backdoor_count": 4},
    }
    for name, value in sections.items():
        if isinstance(value, dict) and isinstance(data.get(name), dict):
            data[name] = {**data[name], **value}
        else:
            data[name] = value
    return data
