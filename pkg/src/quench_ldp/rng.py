"""Counter-based random streams for reproducible, order-independent replicas.

Every replica gets its own Philox stream keyed by ``(seed, replica_id)``.
Philox is counter based, so streams are independent of scheduling order and
can be recreated bit-exactly from the key alone.  Non-replica draws (medium
sampling, scratch noise) use the same mechanism with a namespace tag in
place of the replica id.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Namespace tags, kept clear of the replica-id range (plain counters from 0).
TAG_MEDIUM = 0xABCD_0001_0000_0000
TAG_SCRATCH = 0xABCD_0002_0000_0000


def stream(seed: int, which: int) -> np.random.Generator:
    """Return the Philox generator keyed by ``(seed, which)``."""
    key = np.array([seed & _MASK64, which & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def replica_stream(seed: int, replica_id: int) -> np.random.Generator:
    """Independent stream for one replica of a Monte Carlo ensemble."""
    if replica_id < 0:
        raise ValueError("replica_id must be nonnegative")
    return stream(seed, replica_id)


def medium_stream(seed: int) -> np.random.Generator:
    """Stream used to draw one environment realization."""
    return stream(seed, TAG_MEDIUM)
