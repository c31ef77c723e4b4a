"""Stable sub-stream derivation and config digests.

Python's ``hash`` is salted per process, so every derived seed goes through
blake2b instead.
"""
from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def derive_seed(*keys: Any) -> int:
    """Map an arbitrary tuple of ints/strings to a stable 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for k in keys:
        token = repr(k).encode("utf-8")
        h.update(len(token).to_bytes(4, "little"))
        h.update(token)
    return int.from_bytes(h.digest(), "little")


def derive_rng(*keys: Any) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*keys)))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_digest(obj: Any) -> str:
    """Short sha256 of the canonicalised JSON form; independent of key order."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]
