"""Deterministic sub-seed derivation.

Every random stage of the pipeline draws from a generator seeded by the root
seed plus a label path, so individual stages can be re-run in isolation and
still reproduce byte-identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *tokens) -> int:
    """Derive a stable 63-bit seed from a root seed and a label path."""
    material = ":".join([str(root), *(str(t) for t in tokens)]).encode()
    digest = hashlib.sha256(material).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def make_rng(root: int, *tokens) -> np.random.Generator:
    """Generator seeded by ``derive_seed(root, *tokens)``."""
    return np.random.default_rng(derive_seed(root, *tokens))
