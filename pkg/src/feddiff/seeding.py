"""Deterministic derivation of independent RNG streams.

Every source of randomness in the framework is an explicit
``numpy.random.Generator``. Streams for clients, rounds, evaluation, etc.
are derived from the experiment seed plus string/int tags, so results do
not depend on execution order or parallel scheduling.
"""

import hashlib

import numpy as np


def derive_seed(root_seed: int, *tags) -> int:
    """Hash (root_seed, *tags) into a 64-bit integer seed.

    Uses SHA-256 so the mapping is stable across platforms and Python
    processes (unlike the built-in ``hash``).
    """
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(root_seed: int, *tags) -> np.random.Generator:
    """Return an independent Generator for the given (seed, tags) stream."""
    return np.random.default_rng(derive_seed(root_seed, *tags))
