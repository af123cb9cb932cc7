"""Splittable, counter-based random streams.

Every stream is addressed by a root seed plus a tuple of coordinates
(run, stage, repetition, role, block, ...).  Coordinates are hashed into a
``SeedSequence`` spawn key and fed to a Philox generator, so two streams with
the same address always produce the same draws and distinct addresses give
independent streams, whatever order they are created in.
"""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

Coordinate = Union[int, str]


def _encode(coord: Coordinate) -> int:
    if isinstance(coord, (int, np.integer)):
        if coord < 0:
            raise ValueError(f"stream coordinates must be non-negative, got {coord}")
        return int(coord)
    # strings map to a stable 32-bit tag placed above the integer range used
    # by counters so "3" and 3 never collide
    return (1 << 40) + zlib.crc32(str(coord).encode())


class RngStream:
    """Address of a reproducible random stream.

    Parameters
    ----------
    seed : int
        Root seed of the run.
    coords : tuple
        Stream coordinates; ints or short string role tags.
    """

    __slots__ = ("seed", "coords")

    def __init__(self, seed: int, coords: tuple = ()):
        self.seed = int(seed)
        self.coords = tuple(coords)

    def child(self, *coords: Coordinate) -> "RngStream":
        return RngStream(self.seed, self.coords + tuple(coords))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_encode(c) for c in self.coords))
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, coords={self.coords!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, RngStream) and (self.seed, self.coords) == (other.seed, other.coords)

    def __hash__(self) -> int:
        return hash((self.seed, self.coords))


def as_generator(rng) -> np.random.Generator:
    """Accept an ``RngStream``, a ``Generator`` or an int seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
