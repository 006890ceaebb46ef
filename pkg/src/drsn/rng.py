"""SplitMix64 generator.

Every random decision in the package (weight init, shuffling, augmentation,
synthetic data) is derived from a single u64 seed through this generator, so
results never depend on ambient entropy or on numpy's global state. Bulk
draws (gamma speckle, uniform weights) go through a numpy ``Generator``
seeded from a SplitMix64 output.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# stream tags passed to derive_seed
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_AUGMENT = 3
STREAM_DATA = 4
STREAM_GRADCHECK = 5


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform double in [0, 1) built from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle, walking from the last index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def numpy(self) -> np.random.Generator:
        return np.random.default_rng(self.next_u64())


def derive_seed(seed: int, stream: int, index: int = 0) -> int:
    """Independent u64 for (seed, stream, index); used to split one run seed."""
    mixer = SplitMix64(seed)
    base = mixer.next_u64()
    return SplitMix64(base ^ ((stream * GOLDEN_GAMMA + index) & MASK64)).next_u64()


def stream(seed: int, tag: int, index: int = 0) -> SplitMix64:
    return SplitMix64(derive_seed(seed, tag, index))
