import hashlib

import numpy as np


def key_to_int(key) -> int:
    """Map a stream key (int or str) to a stable non-negative integer."""
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"Stream keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *keys) -> np.random.Generator:
    """
    Counter-based random stream for the tuple (seed, *keys).

    The same tuple always yields the same numbers, independent of which
    worker or in which order streams are requested.

    Args:
        seed (int): Experiment seed (64 bit).
        *keys (int | str): Purpose tag and task / batch / bounce indices.

    Returns:
        numpy.random.Generator: Generator on a Philox bit generator.
    """
    seed_sequence = np.random.SeedSequence(
        int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(key_to_int(k) for k in keys)
    )
    return np.random.Generator(np.random.Philox(seed_sequence))
