"""Counter-based random streams keyed by ``(seed, draw index)``.

Every draw gets its own Philox stream: the seed is the Philox key and the
draw index sits in the top word of the 256-bit counter. Draw ``k`` is
therefore reproducible without replaying draws ``0..k-1``, and workers that
own disjoint index ranges never share randomness.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, draw_index: int = 0) -> np.random.Generator:
    key = np.array([seed & _MASK64, (seed >> 64) & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, 0, draw_index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def derive_seed(seed: int, *labels: int) -> int:
    """Mix integer labels into ``seed``, e.g. to give each slide its own key."""
    ss = np.random.SeedSequence([seed & _MASK64, *labels])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
