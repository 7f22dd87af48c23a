"""Seed derivation utilities.

All randomness in the toolkit flows from one root seed; subsystems get
their own independent streams by deriving a child seed from the root plus
a string label. Derivation is a stable hash, so the same (root, labels)
pair yields the same stream on every platform and run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root_seed: int, *labels: str) -> int:
    """Derive a child seed from a root seed and one or more stream labels.

    Stable across runs and platforms (SHA-256 based, not hash()).
    """
    payload = ":".join([str(int(root_seed))] + list(labels)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") % (2**32)


def generator(root_seed: int, *labels: str) -> np.random.Generator:
    """A numpy Generator on an independent stream derived from the root seed."""
    return np.random.default_rng(derive_seed(root_seed, *labels))
