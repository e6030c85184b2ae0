"""Deterministic random streams backed by the Philox4x64-10 counter-based generator.

Every source of randomness in the simulator is a (seed, stream_id) pair fed
into numpy's Philox bit generator as its 128-bit key, so identical pairs yield
identical sequences on every platform and streams never interact. Collaborator
streams use the bare collaborator id; all other streams live above 2**32 so
the two ranges cannot collide. Per-round draws within one stream are separated
by offsetting the third word of the Philox counter, which partitions the
stream into disjoint 2**128-value blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1

STREAM_SERVER = 1 << 32
STREAM_INIT = (1 << 32) + 1
STREAM_DATA = (1 << 32) + 2
STREAM_PARTITION = (1 << 32) + 3


@dataclass(frozen=True)
class Rng:
    """A named random stream; equal (seed, stream_id) pairs replay exactly."""

    seed: int
    stream_id: int = 0

    def generator(self, block: int = 0) -> np.random.Generator:
        """Fresh generator over this stream's block. Draw order inside a block
        is up to the caller; distinct blocks never overlap."""
        key = np.array([self.seed & MASK64, self.stream_id & MASK64], dtype=np.uint64)
        counter = np.array([0, 0, block & MASK64, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(counter=counter, key=key))

    def stream(self, stream_id: int) -> "Rng":
        """Sibling stream under the same seed."""
        return Rng(self.seed, stream_id)
