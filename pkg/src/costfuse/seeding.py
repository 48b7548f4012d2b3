"""Deterministic sub-seed derivation.

All randomness in a run flows from one 64-bit master seed; every image,
stage, and model derives its own seed by stable hashing so results are
reproducible across processes and platforms (Python's builtin ``hash`` is
salted per process and must not be used here).
"""

import hashlib


def derive_seed(master_seed: int, *parts) -> int:
    """Derive a 64-bit seed from a master seed and any hashable labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed)).encode("utf-8"))
    for part in parts:
        h.update(b"|")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "big")
