"""Deterministic seed derivation.

Every random draw in a run is keyed by a tuple such as
``(run_seed, "native", branch, cycle, phase, step)``, so results do not depend
on execution order or on how many worker threads are used.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _as_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*keys: int | str) -> int:
    """Map a key tuple to a 63-bit integer seed."""
    seq = np.random.SeedSequence([_as_int(k) for k in keys])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
