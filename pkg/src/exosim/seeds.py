"""Deterministic named RNG substreams.

All randomness in an experiment flows from one root seed; each consumer asks
for a named substream so that e.g. simulation noise and training batches stay
independently reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for (seed, name), stable across runs and platforms."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(tag,)))


def substream_seed(seed: int, name: str, index: int = 0) -> int:
    """A derived integer seed, for consumers that keep their own generators."""
    tag = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(tag, int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
