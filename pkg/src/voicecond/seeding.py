"""Deterministic seed derivation.

Every source of randomness in the package draws from a generator obtained via
``derive_rng(root, *labels)``. The root seed plus a path of string labels maps
to a child seed through BLAKE2s, so independent stages (corpus synthesis,
manifest sampling, parameter init, per-epoch shuffles) have independent,
reproducible streams regardless of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *labels: object) -> int:
    """Stable 64-bit child seed for (root, label path)."""
    h = hashlib.blake2s(digest_size=8)
    h.update(int(root).to_bytes(8, "little", signed=False))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def derive_rng(root: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
