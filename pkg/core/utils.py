"""
Utility functions for sample identity and provenance hashing.
"""

# Sample identity is a content hash, so disjointness checks survive file reordering.

import hashlib
import json
from collections.abc import Iterable
from typing import Any

import numpy as np


def sample_identity(pixels: np.ndarray, label: int) -> str:
    """
    Content hash of one labelled sample.

    Args:
        pixels: H x W x C uint8 pixel array.
        label: Label id of the sample.

    Returns:
        Hex SHA-256 digest over shape, pixel bytes and label.
    """
    hasher = hashlib.sha256()
    hasher.update(repr(tuple(pixels.shape)).encode("ascii"))
    hasher.update(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    hasher.update(int(label).to_bytes(8, "little", signed=True))
    return hasher.hexdigest()


def image_identity(pixels: np.ndarray) -> str:
    """Content hash of an unlabelled image."""
    hasher = hashlib.sha256()
    hasher.update(repr(tuple(pixels.shape)).encode("ascii"))
    hasher.update(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    return hasher.hexdigest()


def combined_hash(identities: Iterable[str]) -> str:
    """Order-sensitive hash over a sequence of identities."""
    hasher = hashlib.sha256()
    for identity in identities:
        hasher.update(identity.encode("ascii"))
    return hasher.hexdigest()


def canonical_json(data: Any) -> str:
    """Deterministic JSON text: sorted keys, no incidental whitespace."""
    return json.dumps(
        data, sort_keys=True, separators=(",", ":"), default=_json_default
    )


def config_hash(data: Any) -> str:
    """SHA-256 over the canonical JSON form of ``data``."""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
