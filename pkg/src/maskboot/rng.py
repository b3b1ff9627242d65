"""Named deterministic random streams derived from one global seed.

Every source of randomness in the package draws from a named substream so
that changing, say, the augmentation recipe never perturbs scene generation.
The derivation is fixed: stream ``name`` with optional integer subkeys maps
to ``SeedSequence(entropy=seed, spawn_key=(STREAM_IDS[name], *subkeys))``.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

STREAM_IDS = {
    "scenegen": 0,
    "augment": 1,
    "kmeans": 2,
    "negatives": 3,
    "init": 4,
    "batching": 5,
    "probe": 6,
}


def stream(seed: int, name: str, *subkeys: int) -> np.random.Generator:
    """Return the named substream of the global seed."""
    if name not in STREAM_IDS:
        raise ConfigError(f"unknown rng stream name: {name!r}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(STREAM_IDS[name], *subkeys))
    return np.random.default_rng(ss)


def capture_state(gen: np.random.Generator) -> dict:
    """Snapshot a generator's state for bit-exact checkpointing."""
    return gen.bit_generator.state


def restore_state(state: dict) -> np.random.Generator:
    """Rebuild a generator from a captured state."""
    gen = np.random.default_rng()
    gen.bit_generator.state = state
    return gen
