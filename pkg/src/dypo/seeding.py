"""Named RNG substreams derived from one root seed.

Every source of randomness (rollouts, teacher draws, pair subsampling,
testbed noise) pulls from its own named substream, so a bench can vary one
noise source while freezing the others, and a training step can be replayed
from a checkpoint without carrying generator state.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def _encode(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK
    raise TypeError(f"substream path parts must be str or int, got {type(part).__name__}")


def substream(seed: int, *path) -> np.random.Generator:
    """Generator for the substream named by ``path`` under ``seed``.

    The same (seed, path) always yields an identical stream, independently
    of any other substream drawn before or after it.
    """
    entropy = [int(seed) & _MASK] + [_encode(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
