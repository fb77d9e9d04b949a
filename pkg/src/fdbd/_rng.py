"""Named, seed-derived random substreams."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *names: object) -> np.random.Generator:
    """Generator keyed by ``seed`` and a path of names.

    The same ``(seed, names)`` always yields the same stream; different name
    paths yield statistically independent streams.
    """
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
