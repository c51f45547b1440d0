"""Counter-based random streams.

Every random draw in a run comes from a generator keyed by
``(root seed, purpose, *counters)``, so the draws for one (round, client)
never depend on how many draws happened elsewhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    key = (_purpose_key(purpose),) + tuple(int(c) for c in counters)
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=key)
    return np.random.default_rng(ss)


def derive_seed(seed: int, purpose: str, *counters: int) -> int:
    """A 63-bit integer seed for APIs that take plain integers."""
    key = (_purpose_key(purpose),) + tuple(int(c) for c in counters)
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=key)
    hi, lo = (int(w) for w in ss.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) >> 1
