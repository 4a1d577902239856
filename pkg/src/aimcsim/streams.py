"""Seeded, splittable random streams.

Every stochastic operation in the simulator draws from an explicit
``RngStream``. A stream is identified by a 64-bit master seed plus a
stream id derived from (layer index, purpose tag, repetition index), so
per-layer / per-seed noise draws are reproducible regardless of the
order in which layers or seeds are evaluated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = ["derive_stream_id", "RngStream"]

_MASK64 = (1 << 64) - 1


def derive_stream_id(layer_index: int, purpose: str, repetition: int = 0) -> int:
    """Stable 64-bit stream id from a (layer, purpose, repetition) triple."""
    payload = f"{layer_index}|{purpose}|{repetition}".encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


@dataclass
class RngStream:
    """A deterministic random stream.

    Two streams constructed with the same (master_seed, stream_id) produce
    bit-identical sequences; distinct stream ids give statistically
    independent sequences (PCG64 seeded through SeedSequence).
    """

    master_seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence([self.master_seed & _MASK64, self.stream_id & _MASK64])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, purpose: str, layer_index: int = 0, repetition: int = 0) -> "RngStream":
        """Derive an independent child stream; the parent is not advanced."""
        child_id = derive_stream_id(layer_index, purpose, repetition) ^ self.stream_id
        return RngStream(self.master_seed, child_id)

    def gaussian(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Draw N(mean, std^2) samples. ``std`` must be >= 0."""
        if std < 0:
            raise ValueError(f"std must be nonnegative, got {std}")
        if std == 0.0:
            return np.full(shape, float(mean))
        return self._gen.normal(loc=mean, scale=std, size=shape)

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform_int(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
