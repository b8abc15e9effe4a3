"""Deterministic random-stream derivation.

All randomness in the package flows from a single 64-bit seed through named
sub-streams, so that e.g. data generation, parameter init and class sampling
stay independent yet reproducible bit-for-bit across runs and platforms.
"""

import numpy as np

# Stable label -> integer mapping; SeedSequence entropy must be numeric.
def _encode(label):
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    # FNV-1a over UTF-8 bytes: stable across interpreter runs (unlike hash()).
    h = 0xCBF29CE484222325
    for byte in str(label).encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def derive_rng(seed, *stream):
    """Return an np.random.Generator for the sub-stream named by `stream`.

    `stream` components may be ints (sample indices) or strings (stream
    names, e.g. "init", "crop").
    """
    entropy = [_encode(seed)] + [_encode(s) for s in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
