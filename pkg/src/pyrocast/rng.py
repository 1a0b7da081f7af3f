"""Seeded, splittable random streams.

Every stochastic component draws from a Philox (counter-based) generator keyed
by ``(seed, *keys)`` through numpy's ``SeedSequence`` hashing, so ensemble
members, trajectories and workers get independent streams that do not depend
on scheduling order.
"""
from __future__ import annotations

import numpy as np
import torch


def seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def derive_seed(seed: int, *keys: int) -> int:
    """Hash ``(seed, *keys)`` into a fresh 63-bit seed."""
    state = seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0]
    return int(state) & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))


def torch_generator(seed: int, *keys: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *keys))
    return gen
