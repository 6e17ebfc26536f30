"""Named random sub-streams derived from a single integer seed."""

import zlib

import numpy as np

STREAMS = ("data", "mixing", "split", "init", "shuffle", "surrogate", "triplet", "eval", "baseline")


def stream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for ``name`` under ``seed``.

    The stream key is a CRC of the name, so adding a new stream never
    perturbs the draws of an existing one.
    """
    if name not in STREAMS:
        raise ValueError(f"unknown random stream {name!r}")
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
