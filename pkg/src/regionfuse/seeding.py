"""Deterministic seed derivation.

Every random stream in the package is keyed by a master seed plus a string
tag, hashed with blake2b. Streams are therefore independent of call order
and of which other streams exist, which is what makes run-to-run and
variant-to-variant comparisons bit-exact.
"""

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Collapse (seed, tag, ...) into a stable 64-bit seed."""
    key = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
