"""Counter-based RNG derivation: one root seed fans out to independent streams.

Every source of randomness in the engine comes from ``derive_rng(seed, *path)``
where ``path`` is a stable tuple of small integers naming the consumer. Streams
never share state, so adding a consumer cannot shift another's draws.
"""

from __future__ import annotations

import numpy as np

# stream tags; values are part of the reproducibility contract
STREAM_TOWER_INIT_Q = 1
STREAM_TOWER_INIT_P = 2
STREAM_BATCH_SAMPLER = 3
STREAM_CLUSTERING = 4
STREAM_ICT = 5
STREAM_READER_INIT = 6
STREAM_FINETUNE_ORDER = 7
STREAM_INDEX_BUILD = 8


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Deterministic generator for stream ``path`` under the root ``seed``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([int(seed), *[int(p) for p in path]])


def derive_seed(seed: int, *path: int) -> int:
    """A derived 63-bit integer seed, for components that take plain seeds."""
    return int(derive_rng(seed, *path).integers(0, 2**63 - 1))
