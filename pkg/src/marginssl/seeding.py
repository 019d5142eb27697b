"""Stable seed derivation: one root seed, independent named streams."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *names) -> int:
    """64-bit seed from ``root`` and a path of names, stable across runs and platforms."""
    key = "/".join([str(int(root))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng_for(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
