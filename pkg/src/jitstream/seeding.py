"""Labeled child-seed derivation: one root seed drives every stochastic
component through stable, named lanes."""
from __future__ import annotations

import zlib

import numpy as np


def child_seed(root: int, *labels) -> np.random.SeedSequence:
    parts = [int(root) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        if isinstance(label, str):
            parts.append(zlib.crc32(label.encode("utf-8")))
        else:
            parts.append(int(label) & 0xFFFFFFFFFFFFFFFF)
    return np.random.SeedSequence(parts)


def child_rng(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(child_seed(root, *labels))
