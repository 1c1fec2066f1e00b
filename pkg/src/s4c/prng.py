"""Portable counter-based pseudo-random number generation.

Every random draw in this package (phantom geometry, noise, weight
initialization, patch sampling, fold shuffling) goes through `Prng` so that
a fixed seed yields bit-identical output across runs and platforms.  The
generator is a counter-mode variant of the splitmix64 finalizer: the i-th
raw value of a stream is ``mix64(key + i * GAMMA)``, which needs no carried
state beyond the counter and therefore parallelizes and replays trivially.

Gaussian variates come from Box-Muller and are snapped to a 2**-20 grid so
that last-ulp differences between libm implementations cannot leak into
generated data.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64

# Gaussians are rounded to multiples of this quantum (~9.5e-7); the rounding
# error is negligible against any noise scale used here but absorbs libm
# differences in log/sqrt/cos/sin.
GAUSSIAN_QUANTUM = 2.0**-20


def mix64(x: np.ndarray | int) -> np.ndarray | np.uint64:
    """splitmix64 finalizer; accepts scalars or uint64 arrays.

    All arithmetic is mod 2**64 by construction; the errstate guard keeps
    numpy from warning about the intended wraparound on scalar inputs.
    """
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64)
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        z = z ^ (z >> _U64(31))
        return z if z.ndim else np.uint64(z)


class Prng:
    """Deterministic stream of portable random numbers.

    A stream is identified by a 64-bit key derived from ``seed`` plus any
    number of integer labels, so independent substreams can be spawned
    without coordinating counters: ``Prng(7, 3, 1)`` and
    ``Prng(7).spawn(3).spawn(1)`` are the same stream.
    """

    def __init__(self, seed: int, *labels: int):
        with np.errstate(over="ignore"):
            key = mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GAMMA ^ _U64(0x5851F42D4C957F2D))
            for lab in labels:
                key = mix64(key + np.uint64(lab & 0xFFFFFFFFFFFFFFFF) * _GAMMA + _U64(1))
        self._key = np.uint64(key)
        self._counter = 0

    def spawn(self, *labels: int) -> "Prng":
        """Child stream with an independent counter."""
        child = Prng.__new__(Prng)
        key = self._key
        with np.errstate(over="ignore"):
            for lab in labels:
                key = mix64(key + np.uint64(lab & 0xFFFFFFFFFFFFFFFF) * _GAMMA + _U64(1))
        child._key = np.uint64(key)
        child._counter = 0
        return child

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit values."""
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return mix64(self._key + idx * _GAMMA)

    def uniform(self, n: int) -> np.ndarray:
        """float64 in [0, 1) with 53-bit resolution."""
        return (self.u64(n) >> _U64(11)).astype(np.float64) * 2.0**-53

    def gaussian(self, n: int) -> np.ndarray:
        """Standard normal variates (Box-Muller, grid-quantized)."""
        m = (n + 1) // 2
        raw = self.u64(2 * m)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1).
        u1 = ((raw[:m] >> _U64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[m:] >> _U64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return np.rint(z / GAUSSIAN_QUANTUM) * GAUSSIAN_QUANTUM

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """int64 array of values in [lo, hi); fixed-point range mapping."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        span = np.uint64(hi - lo)
        scaled = ((self.u64(n) >> _U64(32)) * span) >> _U64(32)
        return scaled.astype(np.int64) + lo

    def randint(self, lo: int, hi: int) -> int:
        return int(self.integers(lo, hi, 1)[0])

    def uniform_in(self, lo: float, hi: float, n: int = 1) -> np.ndarray:
        return lo + (hi - lo) * self.uniform(n)

    def uniform1(self, lo: float, hi: float) -> float:
        return float(self.uniform_in(lo, hi, 1)[0])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def shuffled(self, items: list) -> list:
        return [items[i] for i in self.permutation(len(items))]
