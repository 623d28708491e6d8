"""Deterministic named RNG substreams.

All randomness in the pipeline flows from a single master seed.  Each module
derives its own substream by name, so adding a consumer never perturbs the
draws seen by existing ones, and parallel workers can be handed precomputed
per-item seeds.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream_seed(master_seed: int, name: str, index: int = 0) -> int:
    """Stable 64-bit seed for substream `name`/`index` of a master seed."""
    h = hashlib.sha256()
    h.update(int(master_seed).to_bytes(8, "little", signed=False))
    h.update(name.encode("utf-8"))
    h.update(int(index).to_bytes(8, "little", signed=False))
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(master_seed: int, name: str, index: int = 0) -> np.random.Generator:
    """PCG64 generator for a named substream of the master seed."""
    ss = np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=(_name_key(name), int(index))
    )
    return np.random.Generator(np.random.PCG64(ss))
