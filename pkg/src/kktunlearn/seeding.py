"""Deterministic sub-seed derivation.

A component seed is ``splitmix64(global_seed ^ fnv1a64(tag))``. Both halves
are fixed 64-bit functions, so derived seeds are stable across platforms and
Python versions (unlike ``hash``).
"""

MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(global_seed: int, tag: str) -> int:
    return splitmix64((int(global_seed) & MASK64) ^ fnv1a64(tag))
