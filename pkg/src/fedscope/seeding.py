"""Schedule-independent seed derivation.

Every stochastic draw gets its own generator keyed on
(master seed, purpose tag, entity ids), so the draws never depend on
execution order or thread count.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _word(value) -> int:
    if isinstance(value, str):
        return zlib.crc32(value.encode("utf-8"))
    value = int(value)
    if value < 0:
        raise ValueError(f"seed components must be non-negative, got {value}")
    return value


def derive_seed(master: int, tag: str, *ids) -> int:
    """Return a 64-bit integer seed for ``(master, tag, *ids)``."""
    seq = np.random.SeedSequence([int(master) & _MASK64, _word(tag), *(_word(i) for i in ids)])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def rng_for(master: int, tag: str, *ids) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, tag, *ids))
