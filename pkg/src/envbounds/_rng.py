"""Counter-based uniform streams.

Row ``i`` of a stream is a pure function of ``(seed, stream, i)``, so any
chunk of rows can be generated independently and concatenated in any order
with bit-identical results.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox, SeedSequence

# Philox emits 4 uint64 per counter step; rows are padded to a multiple of 4.
_WORDS_PER_STEP = 4


def _key(seed: int, stream: int) -> np.ndarray:
    return SeedSequence([int(seed), int(stream)]).generate_state(2, np.uint64)


def uniform_rows(seed: int, start: int, stop: int, width: int, stream: int = 0) -> np.ndarray:
    """Uniform draws in [0, 1) for rows ``start:stop`` of a ``width``-column stream."""
    if start < 0 or stop < start:
        raise ValueError(f"invalid row range [{start}, {stop})")
    padded = -(-width // _WORDS_PER_STEP) * _WORDS_PER_STEP
    bitgen = Philox(key=_key(seed, stream))
    bitgen.advance(start * (padded // _WORDS_PER_STEP))
    return Generator(bitgen).random((stop - start, padded))[:, :width]


def derive_seed(*parts: int) -> int:
    """Stable 32-bit child seed from integer parts (e.g. root seed, side, e, j).

    32 bits because scikit-learn rejects larger ``random_state`` integers.
    """
    return int(SeedSequence([int(p) for p in parts]).generate_state(1, np.uint32)[0])
