"""Deterministic seed fan-out.

One global seed, spread to per-component streams via fixed string labels
so every stage is reproducible from (config, seed) alone.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["child_rng", "child_seed"]


def child_seed(seed: int, label: str, *indices: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(label.encode("utf-8")), *indices])


def child_rng(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Independent generator for (seed, label[, index...])."""
    return np.random.default_rng(child_seed(seed, label, *indices))
