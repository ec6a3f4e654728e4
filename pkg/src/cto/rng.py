"""Named, splittable random streams.

Every stream is a Philox counter-based generator keyed by
``SeedSequence(seed, spawn_key=keys)``, where string keys are folded to
integers with the first 8 bytes of their SHA-256 digest. The same
``(seed, keys)`` pair yields the same stream on any platform, independent
of how many other streams were drawn before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    return int.from_bytes(hashlib.sha256(str(k).encode("utf-8")).digest()[:8], "little")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))
