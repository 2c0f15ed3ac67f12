"""Named random sub-streams derived from one integer seed."""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. "init", "augment", "data")."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
