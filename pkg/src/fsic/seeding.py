"""Deterministic seed derivation.

Every random decision in the pipeline (intent splits, episode sampling,
parameter init, batch shuffling, the random baseline) draws from its own
named stream derived from one master seed, so runs replay exactly and
streams can be consumed concurrently without interfering.
"""

from __future__ import annotations

import hashlib
import random


def derive_seed(base: int, *tags: object) -> int:
    """Derive a 63-bit child seed from ``base`` and a path of tags.

    Uses SHA-256 over a textual key, so the mapping is stable across
    platforms and Python versions (unlike ``hash()``).
    """
    key = str(int(base)) + "/" + "/".join(str(t) for t in tags)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def derive_rng(base: int, *tags: object) -> random.Random:
    """A fresh ``random.Random`` seeded from :func:`derive_seed`."""
    return random.Random(derive_seed(base, *tags))
