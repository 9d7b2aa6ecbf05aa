"""Deterministic named RNG substreams.

Every random decision in the pipeline draws from a substream derived from
one root seed plus a stream name and integer indices (scene i, batch j, ...).
Substreams are independent of each other and stable across runs and
platforms, so parallelising over scenes or boxes cannot perturb results.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a Generator for the (name, *indices) substream of root_seed.

    The name is hashed with crc32 (stable, not PYTHONHASHSEED-dependent).
    """
    tag = zlib.crc32(name.encode("utf-8"))
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF, tag, *[int(i) & 0xFFFFFFFFFFFFFFFF for i in indices]]
    return np.random.default_rng(np.random.SeedSequence(entropy))
