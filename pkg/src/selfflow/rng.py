"""Named, splittable Philox streams.

Every random draw in the package comes from ``stream(seed, name, *path)``;
the (seed, name, path) triple fully determines the generator, so resuming
a run only needs the step counter.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_name_key(name), *map(int, path)))
    return np.random.Generator(np.random.Philox(ss))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(s)) for s in rng.bit_generator.seed_seq.spawn(n)]
