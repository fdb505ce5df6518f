"""Named, independently seeded random streams.

Each stochastic feature (dropout, gates, masking, SpecAugment, batching) gets
its own generator derived from ``(seed, name)``, so turning one feature off
never shifts the random draws seen by another.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def derive_seed(seed: int, *names) -> int:
    """Deterministic 63-bit seed for ``(seed, *names)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF] + [_name_key(str(n)) for n in names])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = np.random.default_rng(derive_seed(self.seed, name))
            self._streams[name] = gen
        return gen

    def fork(self, name: str) -> "RngStreams":
        return RngStreams(derive_seed(self.seed, "fork", name))

    def state(self) -> dict:
        return {k: g.bit_generator.state for k, g in self._streams.items()}
