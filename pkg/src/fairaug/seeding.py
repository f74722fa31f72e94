"""Derive independent, named random streams from one root seed.

``derive_seed(root, "quadruples", 7)`` hashes the root together with the
component name and any extra keys (e.g. the epoch) with BLAKE2b and takes
the first 8 bytes as an unsigned 64-bit seed. Streams for different names
or keys are therefore independent, and any one of them can be recreated
without replaying the others, which is what makes resume bit-exact.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, name: str, *keys) -> int:
    text = ":".join([str(int(root)), name, *(str(k) for k in keys)])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(root: int, name: str, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, name, *keys))
