"""Named random streams.

Every random draw in the package comes from a generator keyed by a global
seed plus a tuple of names (strings or ints).  Two calls with the same key
always give the same stream, whatever order they happen in.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError(f"stream key integers must be non-negative, got {name}")
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Return the generator for ``(seed, *names)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_part(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))
