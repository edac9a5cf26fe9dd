"""Fibonacci linear feedback shift registers.

Bit ``i`` of the integer state is stage ``i``; stage 0 is the output. A tap
``t`` reads stage ``k - t`` of a ``k``-bit register, and the XOR of all taps is
shifted in at stage ``k - 1``. With taps ``(4, 3)`` the output obeys
``s[n+4] = s[n] ^ s[n+1]`` (polynomial x^4 + x^3 + 1).
"""

from __future__ import annotations

import numpy as np

# x^32 + x^22 + x^2 + x + 1
TAPS_32 = (32, 22, 2, 1)


class LfsrError(ValueError):
    pass


def _check(state: int, taps: tuple[int, ...]) -> int:
    if not taps:
        raise LfsrError("at least one tap required")
    width = max(taps)
    if min(taps) < 1:
        raise LfsrError("taps are 1-based stage numbers")
    if state & ((1 << width) - 1) == 0:
        raise LfsrError("the all-zero state locks the register")
    if state >> width:
        raise LfsrError(f"state does not fit in {width} bits")
    return width


def lfsr_next_bits(state: int, taps: tuple[int, ...], count: int) -> tuple[np.ndarray, int]:
    """Clock the register ``count`` times; return (output bits, new state)."""
    width = _check(state, taps)
    shifts = [width - t for t in taps]
    top = width - 1
    out = np.empty(count, dtype=np.uint8)
    s = state
    for i in range(count):
        fb = 0
        for sh in shifts:
            fb ^= s >> sh
        out[i] = s & 1
        s = (s >> 1) | ((fb & 1) << top)
    return out, s


def lfsr_period(state: int, taps: tuple[int, ...], limit: int = 1 << 24) -> int:
    """Cycle length starting from ``state`` (brute force; small registers only)."""
    width = _check(state, taps)
    shifts = [width - t for t in taps]
    s = state
    for n in range(1, limit + 1):
        fb = 0
        for sh in shifts:
            fb ^= s >> sh
        s = (s >> 1) | ((fb & 1) << (width - 1))
        if s == state:
            return n
    raise LfsrError(f"no cycle within {limit} steps")


class LfsrBitGenerator:
    """Pseudo-random bit stream from a Fibonacci LFSR.

    Only reproduces the demonstration's driver electronics. It is linear and
    trivially predictable; use ``NumpyBitGenerator`` or a CSPRNG otherwise.
    """

    def __init__(self, state: int, taps: tuple[int, ...] = TAPS_32):
        _check(state, taps)
        self.state = state
        self.taps = tuple(taps)

    @classmethod
    def from_seed(cls, seed: int, taps: tuple[int, ...] = TAPS_32) -> "LfsrBitGenerator":
        width = max(taps)
        state = (seed * 0x9E3779B97F4A7C15 + 0x632BE59BD9B4E019) & ((1 << width) - 1)
        return cls(state or 1, taps)

    def bits(self, count: int) -> np.ndarray:
        out, self.state = lfsr_next_bits(self.state, self.taps, count)
        return out


class NumpyBitGenerator:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def bits(self, count: int) -> np.ndarray:
        return self.rng.integers(0, 2, size=count, dtype=np.uint8)


class ConstantBasisGenerator:
    """Random bit values but always the same basis (test fixture for degenerate sifting)."""

    def __init__(self, rng: np.random.Generator, basis: int = 0):
        self.rng = rng
        self.basis = basis

    def bits(self, count: int) -> np.ndarray:
        out = self.rng.integers(0, 2, size=count, dtype=np.uint8)
        # optics reads (basis, value) pairs from even/odd positions
        out[0::2] = self.basis
        return out
