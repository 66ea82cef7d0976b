"""Named, order-independent random streams."""

import zlib

import numpy as np


def str_key(s: str) -> int:
    return zlib.crc32(s.encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by ``(seed, *keys)``; strings are hashed to ints.

    Every rollout, scoring pass and selection draws from its own stream, so
    results never depend on the order (or thread) in which work runs.
    """
    ints = [int(seed)] + [str_key(k) if isinstance(k, str) else int(k) for k in keys]
    return np.random.default_rng(ints)
