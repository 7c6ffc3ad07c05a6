"""Exactly mergeable statistics primitives for the ensemble module.

Moment sums are kept as Shewchuk float expansions, so a sum over any
partition of the paths represents the exact same real number and rounds to
the same float64.  That is what makes worker-count invariance and
merge-vs-single-run equality bitwise instead of merely approximate.
"""

from __future__ import annotations

import math


class ExactSum:
    """Running sum of float64 values with no rounding error.

    Internally a list of non-overlapping partials (Shewchuk's growing
    expansion, the same scheme math.fsum uses).  ``value()`` returns the
    correctly rounded total, which depends only on the multiset of values
    added, never on the order or grouping of additions and merges.
    """

    __slots__ = ("partials",)

    def __init__(self, partials=()):
        self.partials = list(partials)

    def add(self, x: float) -> None:
        partials = self.partials
        i = 0
        for y in partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                partials[i] = lo
                i += 1
            x = hi
        partials[i:] = [x]

    def add_many(self, values) -> None:
        for v in values:
            self.add(float(v))

    def merge(self, other: "ExactSum") -> None:
        # exact: the expansion components of `other` are ordinary floats
        for p in other.partials:
            self.add(p)

    def value(self) -> float:
        return math.fsum(self.partials)

    def copy(self) -> "ExactSum":
        return ExactSum(self.partials)

    def __repr__(self):
        return f"ExactSum({self.value()!r})"


_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer (deterministic 64-bit hash)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def path_priority(master_seed: int, path_id: int) -> int:
    """Pseudorandom 64-bit priority of a path, fixed by (seed, path)."""
    return splitmix64(splitmix64(master_seed & _MASK64) ^ (path_id & _MASK64))


class Reservoir:
    """Bounded sample of per-path values, deterministic under merging.

    Keeps the ``cap`` entries with the smallest hash priorities (a bottom-k
    sketch).  The retained set is a pure function of the contributing path
    ids and the master seed, so merging shards in any order or splitting
    work across any number of workers yields the identical reservoir.
    """

    __slots__ = ("cap", "entries")

    def __init__(self, cap: int, entries=()):
        if cap < 1:
            raise ValueError("reservoir cap must be >= 1")
        self.cap = cap
        self.entries = list(entries)  # (priority, path_id, value)

    def add(self, priority: int, path_id: int, value: float) -> None:
        self.entries.append((priority, path_id, float(value)))
        if len(self.entries) > 2 * self.cap:
            self._shrink()

    def merge(self, other: "Reservoir") -> None:
        if other.cap != self.cap:
            raise ValueError("reservoir cap mismatch")
        self.entries.extend(other.entries)
        self._shrink()

    def _shrink(self) -> None:
        self.entries.sort()
        del self.entries[self.cap :]

    def finalize(self) -> None:
        self._shrink()

    def values(self):
        self.finalize()
        return [e[2] for e in self.entries]

    def items(self):
        self.finalize()
        return list(self.entries)

    def __len__(self):
        self.finalize()
        return len(self.entries)
