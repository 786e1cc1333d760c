"""Counter-based SplitMix64 random streams.

Element ``i`` (0-based) of the stream for ``seed`` is::

    z = (seed + (i + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)

which is exactly the output sequence of the classic SplitMix64 generator
started at ``seed``.  Uniform doubles take the top 53 bits.  Only integer
arithmetic is involved, so uniform streams are bit-identical on every platform;
normal draws go through ``log``/``cos`` and inherit libm's last-ulp behaviour.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import ParameterError

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_G = np.uint64(GOLDEN_GAMMA)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix_scalar(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def random_bits(n: int, seed: int) -> np.ndarray:
    """First ``n`` 64-bit outputs of the SplitMix64 stream for ``seed``."""
    counter = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK) + counter * _G
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *tags: int | str) -> int:
    """Fold ``tags`` into ``seed`` to get an independent child stream seed."""
    out = seed & _MASK
    for tag in tags:
        if isinstance(tag, str):
            h = int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")
        else:
            h = int(tag) & _MASK
        out = _mix_scalar(out ^ _mix_scalar(h + GOLDEN_GAMMA))
    return out


def _unit_interval(n: int, seed: int) -> np.ndarray:
    return (random_bits(n, seed) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def seeded_uniform(shape, lo: float, hi: float, seed: int) -> np.ndarray:
    """Deterministic uniform samples in ``[lo, hi)``."""
    if not lo < hi:
        raise ParameterError(f"seeded_uniform needs lo < hi, got lo={lo}, hi={hi}")
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    n = math.prod(shape)
    u = _unit_interval(n, seed)
    out = lo + (hi - lo) * u
    # lo + (hi - lo) * u can round up to hi
    np.minimum(out, np.nextafter(hi, lo), out=out)
    return out.reshape(shape)


def seeded_normal(shape, seed: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Box-Muller normals built from two child uniform streams."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    n = math.prod(shape)
    u1 = 1.0 - _unit_interval(n, derive_seed(seed, 1))
    u2 = _unit_interval(n, derive_seed(seed, 2))
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return (mean + std * z).reshape(shape)


def seeded_permutation(n: int, seed: int) -> np.ndarray:
    return np.argsort(random_bits(n, seed), kind="stable")


def seeded_integers(n: int, high: int, seed: int) -> np.ndarray:
    """``n`` integers in ``[0, high)``."""
    if high < 1:
        raise ParameterError(f"high must be >= 1, got {high}")
    return np.floor(_unit_interval(n, seed) * high).astype(np.int64)
