"""Deterministic seed substreams.

Every stage derives its randomness from the single top-level run seed via a
named substream, so stages can be re-run independently without perturbing
each other.
"""

import zlib


def substream_seed(seed: int, name: str) -> int:
    """Derive a stable 32-bit seed for a named substream of ``seed``."""
    tag = zlib.crc32(name.encode("utf-8"))
    return (int(seed) * 0x9E3779B1 + tag) % (2**32)
