"""Counter-based random streams.

Every random draw in this package comes from a generator keyed by an
integer seed plus a tuple of string/int tags (purpose, step, sample
index, ...).  The key material is hashed with blake2b into a Philox
counter key, so streams are independent of draw order, of each other,
and of how many draws other streams made.  Re-creating a generator
with the same key always replays the same stream.
"""

import hashlib

import numpy as np


def _key_words(seed, tags):
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            h.update(b"i" + int(tag).to_bytes(8, "little", signed=True))
        elif isinstance(tag, str):
            b = tag.encode("utf-8")
            h.update(b"s" + len(b).to_bytes(4, "little") + b)
        else:
            raise TypeError(f"rng tag must be int or str, got {type(tag).__name__}")
    d = h.digest()
    return [int.from_bytes(d[i : i + 8], "little") for i in range(0, 16, 8)]


def stream(seed, *tags):
    """Return a numpy Generator for the (seed, *tags) key."""
    return np.random.Generator(np.random.Philox(key=_key_words(seed, tags)))


def uniform_index(seed, n, *tags):
    """One integer in [0, n), keyed like stream()."""
    if n < 1:
        raise ValueError(f"uniform_index: n must be >= 1, got {n}")
    return int(stream(seed, *tags).integers(0, n))


def derive_seed(seed, *tags):
    """A new integer seed deterministically derived from (seed, *tags)."""
    return _key_words(seed, tags)[0] >> 1
