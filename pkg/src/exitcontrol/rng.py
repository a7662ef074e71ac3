"""Counter-based random streams keyed by ``(seed, block index)``.

Paths are split into fixed-size blocks; block ``b`` always draws from the
Philox stream derived from ``(seed, b)``, so the noise a path sees depends
only on the seed, its index and the block size -- never on how blocks are
scheduled across workers.
"""

from __future__ import annotations

import numpy as np


def block_generator(seed: int, block: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


def block_slices(n_paths: int, block_size: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + block_size, n_paths)) for lo in range(0, n_paths, block_size)]
