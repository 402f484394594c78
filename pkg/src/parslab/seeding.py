"""Per-purpose random streams derived from one integer seed.

``derive_rng(seed, "sample")`` builds ``SeedSequence(seed, spawn_key=(crc32("sample"),))``.
Streams for different purposes are statistically independent, and drawing
more or fewer numbers from one never shifts another, so an ablation that
switches a component off leaves every other stream untouched.
"""

from __future__ import annotations

import zlib

import numpy as np


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_seed(seed: int, purpose: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(purpose_key(purpose),))


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose))


def derive_int(seed: int, purpose: str) -> int:
    """A plain 32-bit integer seed for APIs that want one."""
    return int(derive_seed(seed, purpose).generate_state(1)[0])
