"""Named random sub-streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def substream(seed: int, *path) -> np.random.Generator:
    """Generator for ``path`` under ``seed``, e.g. ``substream(0, "distill", c, k)``.

    Streams with different paths are statistically independent and each is
    reproducible on its own, so adding draws to one never shifts another.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [_key(p) for p in path]))
