"""Deterministic seed derivation.

Every random draw in the mining pipeline is seeded from the master seed
plus a context path (purpose label, round, batch, ids).  Keeping all
randomness a pure function of (master seed, context) makes runs
reproducible and lets checkpoint/resume continue the exact random
sequence without storing generator cursors.
"""

import hashlib


def derive_seed(*parts) -> int:
    """Hash a sequence of context labels into a 64-bit seed."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")
