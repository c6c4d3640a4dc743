"""Seeded counter-based random streams.

Every random draw in the package comes from a `Stream`: a 64-bit key plus a
counter, run through splitmix64's xorshift-multiply mixer. Streams derived
from the same (seed, labels...) always produce the same values, independent
of how many other streams exist or in what order they are consumed, which is
what makes batch-parallel work and checkpoint resume bit-reproducible.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(x: int) -> int:
    x &= _MASK
    x ^= x >> 30
    x = (x * _MIX1) & _MASK
    x ^= x >> 27
    x = (x * _MIX2) & _MASK
    x ^= x >> 31
    return x


def _mix64_array(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        x ^= x >> np.uint64(30)
        x *= np.uint64(_MIX1)
        x ^= x >> np.uint64(27)
        x *= np.uint64(_MIX2)
        x ^= x >> np.uint64(31)
    return x


class Stream:
    """One deterministic random stream identified by a 64-bit key.

    `derive` folds extra labels (ints or strings) into a child key, so
    per-sample / per-step streams never collide with or perturb each other.
    """

    def __init__(self, seed: int, *labels):
        key = _mix64(seed & _MASK)
        for label in labels:
            key = self._fold(key, label)
        self.key = key
        self.counter = 0

    @staticmethod
    def _fold(key: int, label) -> int:
        if isinstance(label, str):
            h = 0
            for b in label.encode("utf-8"):
                h = _mix64(h ^ b)
        else:
            h = _mix64(int(label) & _MASK)
        return _mix64(key ^ (h * _GOLDEN & _MASK))

    def derive(self, *labels) -> "Stream":
        child = Stream.__new__(Stream)
        key = self.key
        for label in labels:
            key = self._fold(key, label)
        child.key = key
        child.counter = 0
        return child

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            x = (np.uint64(self.key) + idx * np.uint64(_GOLDEN)).astype(np.uint64)
        return _mix64_array(x)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        """n standard-normal draws (Box-Muller), scaled to N(mu, sigma^2)."""
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # shift into (0, 1] so log never sees zero
        u1 = ((raw[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return mu + sigma * out[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """n ints uniform on [0, high)."""
        return (self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        out = np.arange(n)
        u = self.uniform(n)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            out[i], out[j] = out[j], out[i]
        return out
