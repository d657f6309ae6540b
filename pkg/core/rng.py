"""
Deterministic random streams.

Every random draw in the laboratory comes from a ``RngStream``: a value naming a
master seed plus a path of purposes and indices (``("poison", 3)``). A stream
is expanded into a numpy ``Generator`` backed by the counter-based Philox bit
generator, so equal paths give identical draws regardless of call order.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

PathPart = int | str


def _part_to_int(part: PathPart) -> int:
    if isinstance(part, bool):
        return int(part)
    if isinstance(part, int):
        if part < 0:
            # SeedSequence spawn keys must be non-negative
            return (1 << 63) | (-part)
        return part
    digest = hashlib.sha256(part.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*parts: PathPart) -> int:
    """Hash an arbitrary path of ints and strings into a 63-bit seed."""
    hasher = hashlib.sha256()
    for part in parts:
        hasher.update(repr(part).encode("utf-8"))
        hasher.update(b"\x00")
    return int.from_bytes(hasher.digest()[:8], "little") >> 1


@dataclass(frozen=True)
class RngStream:
    """
    Immutable description of a random sub-stream.

    Attributes:
        seed: Master seed.
        path: Purpose labels and indices identifying the sub-stream.
    """

    seed: int
    path: tuple[PathPart, ...] = ()

    def child(self, *parts: PathPart) -> "RngStream":
        """Return the sub-stream extended by ``parts``."""
        return RngStream(self.seed, self.path + tuple(parts))

    def generator(self) -> np.random.Generator:
        """Build a fresh generator positioned at the start of this stream."""
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_part_to_int(p) for p in self.path)
        )
        return np.random.Generator(np.random.Philox(sequence))
