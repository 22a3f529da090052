"""Named deterministic random substreams.

Every random draw in the repository flows from one run seed through
``substream(seed, *labels)``. Labels are hashed with SHA-256, so streams
are stable across processes and platforms, and per-step labels make any
point of a run reconstructable without replaying the steps before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator for the (seed, labels...) stream; same inputs, same stream."""
    h = hashlib.sha256()
    for label in labels:
        h.update(str(label).encode())
        h.update(b"\x00")
    words = tuple(
        int.from_bytes(h.digest()[i : i + 4], "little") for i in range(0, 16, 4)
    )
    return np.random.default_rng(np.random.SeedSequence((int(seed), *words)))
