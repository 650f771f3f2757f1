"""Deterministic RNG streams derived from (global seed, string keys).

Every stochastic operation in the project draws from a stream obtained
here, so any artifact is a pure function of its config seed.
"""

import hashlib

import numpy as np
import torch


def _digest(seed: int, keys: tuple) -> bytes:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for k in keys:
        h.update(b"\x00")
        h.update(str(k).encode())
    return h.digest()


def np_stream(seed: int, *keys) -> np.random.Generator:
    """Numpy generator for the stream named by ``keys``."""
    entropy = int.from_bytes(_digest(seed, keys)[:16], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy))


def torch_stream(seed: int, *keys) -> torch.Generator:
    """Torch generator for the stream named by ``keys``."""
    g = torch.Generator()
    g.manual_seed(int.from_bytes(_digest(seed, keys)[:8], "little") >> 1)
    return g
