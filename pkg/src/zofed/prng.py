"""Counter-based 64-bit generator with Box-Muller Gaussians.

A stream is identified by a 64-bit key derived from integer words (seed,
round, index, ...). Output word ``i`` of a stream is
``mix64(key + (i + 1) * GAMMA)``, i.e. the SplitMix64 sequence started at
``key``, so any position can be generated without producing the ones before
it. Gaussian pairs come from consecutive words ``(2j, 2j + 1)``::

    u1 = ((w[2j] >> 11) + 1) / 2**53        in (0, 1]
    u2 = (w[2j + 1] >> 11) / 2**53          in [0, 1)
    z[2j]     = sqrt(-2 ln u1) cos(2 pi u2)
    z[2j + 1] = sqrt(-2 ln u1) sin(2 pi u2)
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / (1 << 53)

# domain-separation tags for the words fed to derive_key
TAG_PERTURB = 0x50455254
TAG_MASK = 0x4D41534B
TAG_FEDAVG = 0x46454441


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_key(*words: int) -> int:
    """Hash integer words into one 64-bit stream key."""
    h = 0
    for w in words:
        h = _mix_int(((h ^ (int(w) & MASK64)) + GAMMA) & MASK64)
    return h


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def uint64_words(key: int, count: int, start: int = 0) -> np.ndarray:
    """Words ``start .. start + count - 1`` of the stream ``key``."""
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + counters * np.uint64(GAMMA)
        return _mix_array(z)


def uniform(key: int, count: int) -> np.ndarray:
    """Doubles in [0, 1) from the top 53 bits of each word."""
    return (uint64_words(key, count) >> np.uint64(11)).astype(np.float64) * _INV53


def standard_normal(key: int, count: int) -> np.ndarray:
    pairs = (count + 1) // 2
    w = uint64_words(key, 2 * pairs)
    u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53
    u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) * _INV53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]
