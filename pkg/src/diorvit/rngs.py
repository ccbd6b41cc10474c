"""Named random substreams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "shuffle", "augment", "pair-sampling", "data", "split")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; ``extra`` keys (e.g. epoch) refine it."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
