"""Named RNG sub-streams derived from a single top-level seed.

Every source of randomness in a run (data shuffling, masking, Gumbel noise,
parameter init, dropout) draws from its own named stream so that ablations
with the same seed differ only where intended.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_entropy(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(root_seed: int, *names: str) -> int:
    """Deterministic integer seed for the sub-stream identified by `names`."""
    ss = np.random.SeedSequence([int(root_seed)] + [_name_entropy(n) for n in names])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(root_seed: int, *names: str) -> np.random.Generator:
    """Independent PCG64 generator for the named sub-stream."""
    ss = np.random.SeedSequence([int(root_seed)] + [_name_entropy(n) for n in names])
    return np.random.Generator(np.random.PCG64(ss))


def stream_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's state."""
    return rng.bit_generator.state


def restore_stream(state: dict) -> np.random.Generator:
    """Rebuild a generator from a `stream_state` snapshot."""
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
