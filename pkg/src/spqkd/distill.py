"""Key distillation: CASCADE error correction and Toeplitz privacy amplification.

CASCADE runs on Bob's side against a parity oracle for Alice's key. Pass ``i``
shuffles the key with a permutation both sides derive from a public seed,
splits it into blocks of ``k1 * 2**i`` bits (``k1 = ceil(0.73 / e)``), and
binary-searches every block whose parities disagree. A bit fixed in one pass
flips the parity of its blocks in all earlier passes, which are searched again.

Alice's key never changes during reconciliation, so the parity she reports for
a given (pass, start, end) range is final. Those answers are cached and never
asked twice; the leakage ledger counts each distinct answer once.
"""

from __future__ import annotations

import enum
import hashlib
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.signal import fftconvolve

from .security import OperatingPoint, amplification_fraction, secret_fraction

CASCADE_PASSES = 4
BLOCK_CONSTANT = 0.73
MAX_QBER = 0.11
DIGEST_BYTES = 8
MAX_EXTRA_PASSES = 4  # confirmation passes allowed after a digest mismatch


class ReconciliationError(Exception):
    """The error rate leaves no room for a positive key, or keys still differ."""


@dataclass
class LeakageLedger:
    parity_bits_disclosed: int = 0
    sampled_bits_disclosed: int = 0
    digest_bits_disclosed: int = 0
    multiphoton_fraction: float = 0.0  # S_m / p_exp used for compression
    f_e_used: float = 1.0

    def disclose_parity(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("leakage only grows")
        self.parity_bits_disclosed += n

    def disclose_samples(self, n: int) -> None:
        if n < 0:
            raise ValueError("leakage only grows")
        self.sampled_bits_disclosed += n

    def disclose_digest(self, n_bits: int) -> None:
        if n_bits < 0:
            raise ValueError("leakage only grows")
        self.digest_bits_disclosed += n_bits

    @property
    def total(self) -> int:
        return self.parity_bits_disclosed + self.sampled_bits_disclosed + self.digest_bits_disclosed


class ParityChannel(Protocol):
    def parity(self, pass_index: int, block_index: int, start: int, end: int) -> int:
        """Parity of Alice's key over positions ``perm[pass_index][start:end]``."""
        ...


def cascade_permutation(n: int, seed: int, pass_index: int) -> np.ndarray:
    """Pass 0 keeps the natural order; later passes use public seeded shuffles."""
    if pass_index == 0:
        return np.arange(n)
    return np.random.default_rng([seed, pass_index]).permutation(n)


def cascade_permutations(n: int, seed: int, passes: int = CASCADE_PASSES) -> list[np.ndarray]:
    return [cascade_permutation(n, seed, i) for i in range(passes)]


def initial_block_size(qber: float) -> int:
    return max(1, math.ceil(BLOCK_CONSTANT / qber))


class ParityResponder:
    """Alice's side: answers range parities over her fixed key."""

    def __init__(self, key: np.ndarray, seed: int, max_passes: int = CASCADE_PASSES + MAX_EXTRA_PASSES):
        self.key = np.asarray(key, dtype=np.uint8)
        self.seed = seed
        self.max_passes = max_passes
        self.perms: dict[int, np.ndarray] = {}
        self.answered = 0

    def parity(self, pass_index: int, block_index: int, start: int, end: int) -> int:
        if not (0 <= pass_index < self.max_passes and 0 <= start < end <= self.key.size):
            raise ValueError(f"bad parity range pass={pass_index} [{start}, {end})")
        if pass_index not in self.perms:
            self.perms[pass_index] = cascade_permutation(self.key.size, self.seed, pass_index)
        self.answered += 1
        return int(self.key[self.perms[pass_index][start:end]].sum() & 1)


@dataclass
class CascadeResult:
    key: np.ndarray
    ledger: LeakageLedger
    corrected: list[int] = field(default_factory=list)
    block_sizes: list[int] = field(default_factory=list)

    @property
    def errors_corrected(self) -> int:
        return len(self.corrected)


class Cascade:
    """Bob's reconciliation state, resumable with extra passes.

    ``run()`` performs the standard passes. If the keys still differ (the
    caller finds out by comparing digests) ``extra_pass()`` adds one more
    pass over a fresh shuffle, cascading back into every earlier pass as
    usual. The first extra pass uses the first-pass block size and each later
    one halves it; small blocks are what separate the leftover error pairs on
    short keys, or on keys whose QBER was underestimated.
    """

    def __init__(self, key: np.ndarray, qber_estimate: float, channel: ParityChannel, seed: int,
                 ledger: LeakageLedger | None = None):
        if not 0 < qber_estimate < MAX_QBER:
            raise ReconciliationError(f"QBER estimate {qber_estimate:.4f} outside (0, {MAX_QBER})")
        self.ledger = ledger if ledger is not None else LeakageLedger()
        self.bob = np.array(key, dtype=np.uint8)
        self.channel = channel
        self.seed = seed
        self.k1 = initial_block_size(qber_estimate)
        self.perms: list[np.ndarray] = []
        self.where: list[np.ndarray] = []
        self.sizes: list[int] = []
        self.corrected: list[int] = []
        self._known: dict[tuple[int, int, int], int] = {}

    @property
    def n(self) -> int:
        return self.bob.size

    def _alice(self, p: int, s: int, e: int) -> int:
        k = (p, s, e)
        if k not in self._known:
            self._known[k] = self.channel.parity(p, s // self.sizes[p], s, e)
            self.ledger.disclose_parity()
        return self._known[k]

    def _mismatch(self, p: int, s: int, e: int) -> bool:
        return self._alice(p, s, e) != int(self.bob[self.perms[p][s:e]].sum() & 1)

    def _block(self, p: int, b: int) -> tuple[int, int]:
        s = b * self.sizes[p]
        return s, min(s + self.sizes[p], self.n)

    def _pass(self, size: int) -> None:
        i = len(self.perms)
        if i >= CASCADE_PASSES + MAX_EXTRA_PASSES:
            raise ReconciliationError("too many CASCADE passes")
        perm = cascade_permutation(self.n, self.seed, i)
        self.perms.append(perm)
        self.where.append(np.argsort(perm))
        self.sizes.append(min(size, self.n))
        queue = deque((i, b) for b in range(-(-self.n // self.sizes[i])) if self._mismatch(i, *self._block(i, b)))
        while queue:
            p, b = queue.popleft()
            s, e = self._block(p, b)
            if not self._mismatch(p, s, e):
                continue
            while e - s > 1:
                mid = (s + e) // 2
                if self._mismatch(p, s, mid):
                    e = mid
                else:
                    s = mid
            pos = int(self.perms[p][s])
            self.bob[pos] ^= 1
            self.corrected.append(pos)
            for r in range(i + 1):
                if r != p:
                    queue.append((r, int(self.where[r][pos]) // self.sizes[r]))

    def run(self, passes: int = CASCADE_PASSES) -> "Cascade":
        if self.n:
            for i in range(passes):
                self._pass(self.k1 << i)
        return self

    def extra_pass(self) -> "Cascade":
        if self.n:
            done = max(0, len(self.perms) - CASCADE_PASSES)
            self._pass(max(2, self.k1 >> done))
        return self

    def result(self) -> CascadeResult:
        return CascadeResult(self.bob.copy(), self.ledger, list(self.corrected), list(self.sizes))


def cascade_reconcile(key: np.ndarray, qber_estimate: float, channel: ParityChannel, seed: int,
                      passes: int = CASCADE_PASSES, ledger: LeakageLedger | None = None) -> CascadeResult:
    """Correct Bob's ``key`` towards Alice's, asking ``channel`` for her parities."""
    return Cascade(key, qber_estimate, channel, seed, ledger).run(passes).result()


def key_digest(bits: np.ndarray) -> bytes:
    """Truncated SHA-256 of a bit string; collision probability 2**-64 per comparison."""
    bits = np.asarray(bits, dtype=np.uint8)
    h = hashlib.sha256(len(bits).to_bytes(8, "little") + np.packbits(bits).tobytes())
    return h.digest()[:DIGEST_BYTES]


# -- privacy amplification ----------------------------------------------------

class PaMode(str, enum.Enum):
    FORMULA = "formula"  # secret fraction 2G/p_exp, reconciliation cost f h(e)
    LEDGER_EXACT = "ledger_exact"  # subtract the bits actually disclosed instead


def toeplitz_hash(key: np.ndarray, seed: np.ndarray, m: int) -> np.ndarray:
    """Multiply ``key`` (n bits) by the m x n Toeplitz matrix T[i, j] = seed[i - j + n - 1] over GF(2)."""
    x = np.asarray(key, dtype=np.int64)
    t = np.asarray(seed, dtype=np.int64)
    n = x.size
    if m < 0:
        raise ValueError("output length must be >= 0")
    if m == 0 or n == 0:
        return np.zeros(m, dtype=np.uint8)
    if t.size != n + m - 1:
        raise ValueError(f"Toeplitz seed needs {n + m - 1} bits, got {t.size}")
    if n * t.size <= 1 << 22:
        full = np.convolve(t, x)
    else:
        # integer-valued sums well below 2**52, so rounding is exact
        full = np.rint(fftconvolve(t.astype(float), x.astype(float))).astype(np.int64)
    return (full[n - 1:n - 1 + m] & 1).astype(np.uint8)


def final_key_length(n: int, op: OperatingPoint, ledger: LeakageLedger | None = None,
                     mode: PaMode = PaMode.FORMULA) -> int:
    mode = PaMode(mode)
    if mode is PaMode.FORMULA:
        m = math.floor(n * secret_fraction(op))
    else:
        if ledger is None:
            raise ValueError("ledger-exact mode needs the leakage ledger")
        m = math.floor(n * amplification_fraction(op)) - ledger.parity_bits_disclosed - ledger.digest_bits_disclosed
    return max(0, m)


@dataclass
class DistilledKey:
    bits: np.ndarray
    digest: str
    secure: bool

    @property
    def length(self) -> int:
        return int(self.bits.size)


def finish(bits: np.ndarray, secure: bool = True) -> DistilledKey:
    bits = np.asarray(bits, dtype=np.uint8)
    return DistilledKey(bits, key_digest(bits).hex(), secure and bits.size > 0)


def privacy_amplify(key: np.ndarray, ledger: LeakageLedger, op: OperatingPoint,
                    seed: np.ndarray | np.random.Generator, mode: PaMode = PaMode.FORMULA) -> DistilledKey:
    """Compress a reconciled key to its secure length.

    ``seed`` is either the public Toeplitz seed (its length fixes the output
    length) or a generator to draw one of ``n + m - 1`` bits from.
    """
    key = np.asarray(key, dtype=np.uint8)
    n = key.size
    ledger.multiphoton_fraction = op.s_m / op.p_exp
    ledger.f_e_used = op.f_e
    if isinstance(seed, np.random.Generator):
        m = final_key_length(n, op, ledger, mode)
        if m == 0:
            return finish(np.zeros(0, dtype=np.uint8), secure=False)
        seed = seed.integers(0, 2, size=n + m - 1, dtype=np.uint8)
    else:
        seed = np.asarray(seed, dtype=np.uint8)
        m = seed.size - n + 1 if seed.size else 0
    return finish(toeplitz_hash(key, seed, m))
