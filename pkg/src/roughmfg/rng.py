"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by a
hash of (seed, *path), where path is a tuple of strings/ints naming the
consumer (module, purpose, branch index, ...).  Streams are therefore
independent of execution order: a worker pulling stream ("rsde", "W") gets
the same numbers no matter what ran before it.
"""

import hashlib

import numpy as np


def stream_key(seed, *path) -> np.ndarray:
    """Derive a 128-bit Philox key from a seed and a path of labels."""
    text = repr((int(seed),) + tuple(path)).encode()
    digest = hashlib.blake2b(text, digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64).copy()


def substream(seed, *path) -> np.random.Generator:
    """Deterministic generator for the (seed, *path) slot."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *path)))


def derive_seed(seed, *path) -> int:
    """Child integer seed for a component that takes a plain seed."""
    return int(stream_key(seed, *path)[0] >> 1)
