"""Seed derivation and counter-based random streams.

Every random draw in the package is a pure function of ``(key, counter)``:
``u = mix64(key + counter * GOLDEN)``.  Path ``i`` of an ensemble gets
``key = stream_key(base, i)``, so results never depend on how paths are
split across workers or in which order they run.
"""

import hashlib

import numba as nb
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

MASK64 = (1 << 64) - 1


def derive_seed(master, *labels):
    """Hash a master seed and labels into a 64-bit seed.

    Labels may be any values with a stable ``repr`` (ints, strings, floats).
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(repr(int(master) & MASK64).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(repr(label).encode())
    return int.from_bytes(h.digest(), "little")


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always")
def stream_key(base, index):
    return mix64(np.uint64(base) + (np.uint64(index) + np.uint64(1)) * GOLDEN)


@nb.njit(cache=True, inline="always")
def uniform(key, counter):
    """Uniform double in [0, 1) for draw number ``counter`` of stream ``key``."""
    z = mix64(key + np.uint64(counter) * GOLDEN)
    return float(z >> _S11) * _INV53


@nb.njit(cache=True, inline="always")
def normal_pair(key, counter):
    """Two independent standard normals from draws ``counter`` and ``counter + 1``."""
    u1 = uniform(key, counter)
    u2 = uniform(key, counter + 1)
    r = np.sqrt(-2.0 * np.log(1.0 - u1))
    t = 2.0 * np.pi * u2
    return r * np.cos(t), r * np.sin(t)


@nb.njit(cache=True)
def uniforms(key, start, count):
    out = np.empty(count)
    for i in range(count):
        out[i] = uniform(key, start + i)
    return out


def as_key(seed):
    """Python int seed -> numpy uint64 key."""
    return np.uint64(int(seed) & MASK64)
