"""Named random sub-streams derived from one 64-bit seed."""

import zlib

import numpy as np

STREAMS = ("split", "init", "shuffle", "synth")


def substream(seed, name, *extra):
    if name not in STREAMS:
        raise ValueError(f"unknown random stream {name!r}")
    key = (zlib.crc32(name.encode("ascii")),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key))


def subseed(seed, name, *extra):
    """A 32-bit integer seed drawn from the named stream (for APIs that take ints)."""
    return int(substream(seed, name, *extra).integers(0, 2**32 - 1))
