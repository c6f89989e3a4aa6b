"""Deterministic RNG derivation.

Every random draw in the library flows from an explicit seed through a
counter-based (Philox) generator keyed by a stable hash of string context
parts, so results never depend on the order in which images are processed
or on how work is split across workers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*parts) -> np.ndarray:
    """Stable 128-bit Philox key from arbitrary context parts.

    Parts are stringified and joined with an unprintable separator, so
    ("a", "bc") and ("ab", "c") derive different keys.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8")


def derive_rng(*parts) -> np.random.Generator:
    """Independent generator for the given context, e.g. (seed, image_id)."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))


def stable_hash64(text: str) -> int:
    """Stable 64-bit hash of a string (unlike builtin ``hash``)."""
    return int.from_bytes(
        hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little"
    )
