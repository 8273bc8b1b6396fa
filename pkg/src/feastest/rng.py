"""Deterministic random-number streams.

Every Monte-Carlo quantity in this package is a pure function of a triple
``(seed, stream, index)``.  The triple is packed into a Philox-4x64 counter
key, so a draw can be regenerated independently of any other draw: parallel
and serial executions produce bit-identical results, and re-running a command
with the same seed reproduces every random quantity exactly.
"""

from __future__ import annotations

import numpy as np

# Stream identifiers.  Values are part of the reproducibility contract
# (reports record only the top-level seed), so never renumber them.
MC_GAUSSIAN = 1
RADEMACHER = 2
NOISE = 3
MULTISTART = 4
DESIGN = 5
GENERIC = 6

_MASK32 = 0xFFFFFFFF
_MASK64 = 0xFFFFFFFFFFFFFFFF


def stream(seed: int, stream_id: int, index: int = 0) -> np.random.Generator:
    """Return the generator owned by ``(seed, stream_id, index)``.

    ``index`` distinguishes repetitions (simulation reps, multistart points,
    ...) inside one logical stream; it must fit in 32 bits.
    """
    if not 0 <= index <= _MASK32:
        raise ValueError(f"stream index {index} outside [0, 2^32)")
    key = [seed & _MASK64, ((stream_id & _MASK32) << 32) | (index & _MASK32)]
    return np.random.Generator(np.random.Philox(key=key))
