"""Deterministic seed derivation.

Every random decision in the engine flows from a single user seed. Subsystems
and per-sample work derive their own streams by mixing the root seed with
integer or string tags through a fixed 64-bit finalizer, so results are
reproducible regardless of evaluation order or parallel scheduling.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def mix64(*parts: int | str) -> int:
    """Fold parts into one well-distributed 64-bit value (splitmix64 finalizer)."""
    h = 0x9E3779B97F4A7C15
    for part in parts:
        if isinstance(part, str):
            for b in part.encode("utf-8"):
                h = _mix_step(h, b)
            h = _mix_step(h, len(part))
        else:
            h = _mix_step(h, int(part))
    return h


def _mix_step(h: int, v: int) -> int:
    h = (h + (v & _MASK64)) & _MASK64
    h ^= h >> 30
    h = (h * 0xBF58476D1CE4E5B9) & _MASK64
    h ^= h >> 27
    h = (h * 0x94D049BB133111EB) & _MASK64
    h ^= h >> 31
    return h


def derived_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """A fresh generator seeded from (seed, *tags)."""
    return np.random.Generator(np.random.PCG64(mix64(seed, *tags)))
