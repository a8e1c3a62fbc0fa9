"""Named random sub-streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``.

    Names may be strings or ints, e.g. ``substream(7, "proposals", epoch, "t0003")``.
    Streams with different name paths never share draws, so toggling one
    component leaves the randomness of every other component untouched.
    """
    entropy = [int(seed) & 0xFFFFFFFF, int(seed) >> 32 & 0xFFFFFFFF] + [_key(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
