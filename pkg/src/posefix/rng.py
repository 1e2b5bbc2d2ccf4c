"""Deterministic random streams derived from one seed and stable labels."""

from __future__ import annotations

import hashlib

import numpy as np


def _label_int(label) -> int:
    if isinstance(label, (int, np.integer)) and label >= 0:
        return int(label)
    digest = hashlib.sha256(repr(label).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``.

    The same labels always give the same stream regardless of the order in
    which streams are created, so per-instance work can be parallelised.
    """
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_label_int(x) for x in labels))
    return np.random.Generator(np.random.PCG64(ss))
