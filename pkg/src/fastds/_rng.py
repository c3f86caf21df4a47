"""Named random sub-streams derived from a single user seed."""

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(seed, name, *extra):
    """Return a Generator for the stream ``name`` under ``seed``.

    Each consumer (MV tie-breaking, annotator subsampling, simulation, ...)
    draws from its own stream, so adding a consumer never perturbs another.
    ``extra`` lets callers key further, e.g. by sweep cell.
    """
    key = [int(seed) & _MASK64, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(x) & _MASK64 for x in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
