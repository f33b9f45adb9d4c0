"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "batch", "mask", "probe", "eval")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for ``name`` under ``seed``; independent of call order elsewhere."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *map(int, extra)]))
