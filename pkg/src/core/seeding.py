"""
Seed management.

Every random stream in dosepool is a ``numpy.random.Generator`` built from a
``SeedSequence`` whose spawn key names the consumer (chain index, scenario,
replication). Streams are therefore independent of the order in which workers
run them.
"""

from typing import Optional

import numpy as np

SEED_MAX = 2**64 - 1


def fresh_seed() -> int:
    """Draw a random 64-bit seed from OS entropy."""
    return int(np.random.SeedSequence().generate_state(1, dtype=np.uint64)[0])


def derive_seed(seed: int, *key: int) -> int:
    """Derive a child 64-bit seed from ``seed`` and an integer key path."""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *key)``."""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(sequence))


def resolve_seed(seed: Optional[int]) -> int:
    if seed is None:
        return fresh_seed()
    if not 0 <= seed <= SEED_MAX:
        raise ValueError(f"Seed must be an unsigned 64-bit integer, got {seed}")
    return int(seed)
