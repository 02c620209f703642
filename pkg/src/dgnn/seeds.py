"""Deterministic RNG streams derived from one master seed by key hashing.

Every stochastic component (parameter init, shuffling, splits, label noise)
draws from its own stream so that adding or reordering one consumer never
perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed, *keys):
    """Stable 64-bit seed from a master seed and a sequence of string keys."""
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode("utf-8"))
    for key in keys:
        h.update(b"/")
        h.update(str(key).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")


def derive_rng(master_seed, *keys):
    """A numpy Generator seeded from ``derive_seed``."""
    return np.random.default_rng(derive_seed(master_seed, *keys))
