"""Counter-based deterministic random numbers.

Every value is a pure function of ``(seed, stream, counter)``, so results are
bitwise reproducible across runs and independent of call order. The bit
generator is SplitMix64 evaluated at an arbitrary position:

    key      = mix64((seed mod 2**64) XOR (stream * 0xD1B54A32D192ED03))
    bits(n)  = mix64(key + (n + 1) * 0x9E3779B97F4A7C15)        (mod 2**64)

with the standard SplitMix64 finalizer ``mix64``. Uniform doubles use the top
53 bits, offset by half a unit so they lie strictly inside (0, 1). Gaussian
deviates use the Box-Muller transform on counter pairs ``(2k, 2k + 1)``:
``z[2k] = r cos(theta)`` and ``z[2k + 1] = r sin(theta)``.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_STREAM_MUL = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(seed: int, stream: int) -> np.ndarray:
    s = np.array([int(seed) & _MASK64], dtype=np.uint64)
    t = np.array([int(stream) & _MASK64], dtype=np.uint64)
    return _mix64(s ^ (t * _STREAM_MUL))


def random_bits(seed: int, stream: int, counters) -> np.ndarray:
    """Raw 64-bit outputs at the given counter positions."""
    c = np.asarray(counters, dtype=np.uint64)
    return _mix64(_key(seed, stream) + (c + np.uint64(1)) * _GOLDEN)


def uniform(seed: int, stream: int, n: int, start: int = 0) -> np.ndarray:
    """``n`` doubles in the open interval (0, 1)."""
    bits = random_bits(seed, stream, np.arange(start, start + n, dtype=np.uint64))
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def standard_normal(seed: int, stream: int, n: int) -> np.ndarray:
    """``n`` standard Gaussian deviates via Box-Muller."""
    pairs = (n + 1) // 2
    u = uniform(seed, stream, 2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n]


def integers(seed: int, stream: int, high, start: int = 0) -> np.ndarray:
    """Uniform integers in ``[0, high)`` for each entry of ``high``.

    Uses one counter per entry. The modulo-free mapping ``floor(u * high)``
    has bias below 2**-53 relative, which is negligible for volume sizes.
    """
    high = np.atleast_1d(np.asarray(high, dtype=np.int64))
    if np.any(high < 1):
        raise ValueError("upper bound must be >= 1")
    u = uniform(seed, stream, high.size, start=start)
    out = np.floor(u * high).astype(np.int64)
    return np.minimum(out, high - 1)
