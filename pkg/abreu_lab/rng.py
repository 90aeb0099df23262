"""Named random streams derived from a single seed."""

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one consumer.

    The same (seed, name) pair always yields the same sequence, no matter
    which other streams were drawn before it.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))
