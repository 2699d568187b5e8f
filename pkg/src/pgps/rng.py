"""Counter-based deterministic RNG streams.

Every random draw in the package flows through an RngStream addressed by a
hierarchy of integer ids (epoch, iteration, slot, ...). Identical
(seed, ids) always produce identical draws, no matter which worker or in
which order a stream is consumed, which is what makes parallel batch
assembly bitwise reproducible.
"""

from dataclasses import dataclass

import numpy as np

# Reserved slot ids used below the (epoch, iteration) level.
SLOT_PATIENTS = 0
SLOT_PATCH = 1
SLOT_MIRROR = 2


@dataclass(frozen=True)
class RngStream:
    seed: int
    ids: tuple[int, ...] = ()

    def child(self, *ids: int) -> "RngStream":
        ids = tuple(int(i) for i in ids)
        if any(i < 0 for i in ids):
            raise ValueError(f"stream ids must be >= 0, got {ids}")
        return RngStream(self.seed, self.ids + ids)

    def generator(self) -> np.random.Generator:
        """A fresh generator for this stream address.

        Ids are offset by one in the entropy so no entropy word after the
        seed can be zero: SeedSequence ignores trailing zero words, which
        would otherwise alias an address to its zero-extended children.
        """
        entropy = (self.seed, *(i + 1 for i in self.ids))
        return np.random.default_rng(np.random.SeedSequence(entropy))
