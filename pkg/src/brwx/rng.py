"""Reproducible random streams.

Every random draw in an experiment comes from a generator derived from
``(root seed, stream tag, block index)``: the tuple ``(stream, block)`` is
the spawn key of a ``SeedSequence`` that seeds a Philox (counter-based) bit
generator.  A block is one replica for engines that handle replicas one at
a time, and a fixed-size chunk of replicas for vectorised engines.  A
block's draws depend on nothing else, so results are identical whatever the
number of worker processes and whatever order blocks finish in.
"""
from __future__ import annotations

import numpy as np

# stream tags; keep distinct so experiments never share random bits
STREAM_TREE = 1
STREAM_SPINE = 3
STREAM_EXCURSION = 4
STREAM_RECURSIVE = 5
STREAM_LINES = 6
STREAM_WALK = 7
STREAM_DIRECT = 8

DEFAULT_CHUNK = 1000


def replica_rng(seed: int, replica: int, stream: int = 0, sub: int | None = None) -> np.random.Generator:
    """Independent generator for one replica (or chunk) of one stream.

    ``sub`` separates sub-experiments of one run (for instance the n values
    of a ladder); the spawn key is then ``(stream, sub, replica)``.
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    key = (int(stream), int(replica)) if sub is None else (int(stream), int(sub), int(replica))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def chunks(replicas: int, size: int = DEFAULT_CHUNK) -> list[tuple[int, int, int]]:
    """Fixed partition of ``range(replicas)`` into ``(chunk, start, stop)``."""
    if replicas < 0 or size < 1:
        raise ValueError("replicas must be >= 0 and chunk size >= 1")
    return [(i, lo, min(lo + size, replicas)) for i, lo in enumerate(range(0, replicas, size))]


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"unsupported random state {type(rng).__name__}")
