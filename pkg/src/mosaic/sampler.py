"""Uniform random measurement masks, index operators and compression.

Masks are drawn with a SplitMix64 stream feeding a partial Fisher-Yates
shuffle, so a mask is a pure function of ``(n, gamma, seed)`` and can be
replayed by any implementation of the same two algorithms:

* SplitMix64: ``state += 0x9E3779B97F4A7C15``; output
  ``z = state; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
  z = (z ^ z>>27) * 0x94D049BB133111EB; z ^ z>>31`` (all mod 2**64).
* bounded draw in ``[0, r)``: reject outputs ``>= 2**64 - (2**64 mod r)``,
  return ``output mod r``.
* selection: ``pool = [0..n-1]``; for ``t in 0..m-1`` swap ``pool[t]`` with
  ``pool[t + draw(n - t)]``; the mask is ``sorted(pool[:m])``.

Flat indices are row-major: ``l = (i - 1) * N + j`` for 1-based ``(i, j)``.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """SplitMix64 output finaliser."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Minimal SplitMix64 generator (64-bit state, 64-bit outputs)."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def below(self, bound: int) -> int:
        """Unbiased integer in ``[0, bound)``."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next()
            if x < limit:
                return x % bound


def derive_seed(base: int, *keys: int) -> int:
    """Deterministically derive a child seed from ``base`` and integer keys."""
    s = int(base) & MASK64
    for key in keys:
        s = mix64(s ^ mix64((int(key) + GOLDEN) & MASK64))
    return s


def retained_count(n: int, gamma: float) -> int:
    """``m = round(gamma * n)`` with halves rounded up."""
    return int(math.floor(gamma * n + 0.5))


@dataclass(frozen=True)
class MaskSpec:
    """A sorted subset of measurement positions on an N x N grid.

    ``flat`` holds 0-based row-major positions in strictly increasing order.
    """

    n: int
    gamma: float
    seed: int
    flat: tuple = field(repr=False)

    def __post_init__(self):
        side = math.isqrt(self.n)
        if side * side != self.n:
            raise ValueError(f"n={self.n} is not a perfect square")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if any(b <= a for a, b in zip(self.flat, self.flat[1:])):
            raise ValueError("mask indices must be strictly increasing")
        if self.flat and not (0 <= self.flat[0] and self.flat[-1] < self.n):
            raise ValueError("mask index out of range")

    @property
    def m(self) -> int:
        return len(self.flat)

    @property
    def side(self) -> int:
        return math.isqrt(self.n)

    @cached_property
    def flat_array(self) -> np.ndarray:
        a = np.asarray(self.flat, dtype=np.intp)
        a.setflags(write=False)
        return a

    @property
    def indices(self) -> list[tuple[int, int]]:
        """1-based ``(i, j)`` pairs in rank order."""
        return [unflatten(f + 1, self.side) for f in self.flat]

    def contains(self, pair) -> bool:
        i, j = pair
        if not (1 <= i <= self.side and 1 <= j <= self.side):
            return False
        f = (i - 1) * self.side + (j - 1)
        pos = bisect.bisect_left(self.flat, f)
        return pos < self.m and self.flat[pos] == f

    def to_text(self) -> str:
        """Header ``n m gamma seed`` then the 1-based flat indices on one line."""
        body = " ".join(str(f + 1) for f in self.flat)
        return f"{self.n} {self.m} {self.gamma!r} {self.seed}\n{body}\n"

    @classmethod
    def from_text(cls, text: str) -> "MaskSpec":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty mask text")
        head = lines[0].split()
        if len(head) != 4:
            raise ValueError(f"mask header needs 'n m gamma seed', got {lines[0]!r}")
        n, m, gamma, seed = int(head[0]), int(head[1]), float(head[2]), int(head[3])
        flat = tuple(int(t) - 1 for ln in lines[1:] for t in ln.split())
        if len(flat) != m:
            raise ValueError(f"mask header declares m={m} but lists {len(flat)} indices")
        return cls(n, gamma, seed, flat)


def draw_mask(n: int, gamma: float, seed: int) -> MaskSpec:
    """Uniformly sample ``round(gamma * n)`` of ``n`` positions without replacement."""
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    m = retained_count(n, gamma)
    if m == 0:
        raise ValueError(f"gamma={gamma} keeps no measurements out of n={n}")
    rng = SplitMix64(seed)
    pool = list(range(n))
    for t in range(m):
        j = t + rng.below(n - t)
        pool[t], pool[j] = pool[j], pool[t]
    return MaskSpec(n, gamma, int(seed) & MASK64, tuple(sorted(pool[:m])))


def full_mask(n: int, seed: int = 0) -> MaskSpec:
    return MaskSpec(n, 1.0, seed, tuple(range(n)))


def unflatten(l: int, side: int) -> tuple[int, int]:
    """1-based flat index to 1-based row-major ``(i, j)``."""
    if not 1 <= l <= side * side:
        raise ValueError(f"flat index {l} out of range 1..{side * side}")
    return (l - 1) // side + 1, (l - 1) % side + 1


def flatten(i: int, j: int, side: int) -> int:
    if not (1 <= i <= side and 1 <= j <= side):
        raise ValueError(f"pair ({i}, {j}) out of range for side {side}")
    return (i - 1) * side + j


def sort_rank(pair, mask: MaskSpec) -> int:
    """1-based rank of ``pair`` within the row-major ordered mask."""
    i, j = pair
    if not mask.contains(pair):
        raise KeyError(f"pair {pair} is not in the mask")
    f = (i - 1) * mask.side + (j - 1)
    return bisect.bisect_left(mask.flat, f) + 1


@dataclass(frozen=True)
class CompressedMeasurements:
    mask: MaskSpec
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.mask.m,):
            raise ValueError(
                f"values shape {self.values.shape} does not match mask size {self.mask.m}"
            )


def compress(y, mask: MaskSpec) -> CompressedMeasurements:
    """Keep the measurements of ``y`` at the mask positions, in rank order."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (mask.side, mask.side):
        raise ValueError(f"grid shape {y.shape} does not match mask side {mask.side}")
    values = y.reshape(-1)[mask.flat_array].copy()
    values.setflags(write=False)
    return CompressedMeasurements(mask, values)


def scatter(cm: CompressedMeasurements) -> np.ndarray:
    """Zero-filled N x N grid holding the retained measurements."""
    grid = np.zeros(cm.mask.n)
    grid[cm.mask.flat_array] = cm.values
    return grid.reshape(cm.mask.side, cm.mask.side)
