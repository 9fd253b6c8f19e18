"""Seeded, splittable random streams (Philox counter-based generator)."""
from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed, *stream):
    """Generator for ``seed`` and an optional named sub-stream.

    Sub-streams are keyed by strings or ints so independent consumers
    (data generation, poisoning, shuffling) never share draws.
    """
    keys = [int(seed)]
    for s in stream:
        keys.append(zlib.crc32(s.encode()) if isinstance(s, str) else int(s))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(keys)))
