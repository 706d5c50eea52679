"""Seeded random streams.

All randomness in the package flows through ``make_rng``, which returns a
numpy ``Generator`` driven by the PCG64 permuted congruential generator
(O'Neill 2014).  ``derive`` splits independent child streams from a parent
seed and a string label, so adding a consumer never shifts another stream.
"""
from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive(seed: int, label: str) -> np.random.Generator:
    """Independent stream keyed by (seed, label)."""
    return np.random.Generator(np.random.PCG64([int(seed), zlib.crc32(label.encode())]))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """U(-1/sqrt(fan_in), +1/sqrt(fan_in)), the init used for every linear map."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
