import numpy as np
import pytest
from hypothesis import given, strategies as st

from spqkd.lfsr import (
    TAPS_32,
    ConstantBasisGenerator,
    LfsrBitGenerator,
    LfsrError,
    lfsr_next_bits,
    lfsr_period,
)


def brute_force_cycle(state, taps):
    """Enumerate states with an independent bit-list register until the start state recurs."""
    k = max(taps)
    reg = [(state >> i) & 1 for i in range(k)]
    start = list(reg)
    n = 0
    while True:
        fb = 0
        for t in taps:
            fb ^= reg[k - t]
        reg = reg[1:] + [fb]
        n += 1
        if reg == start:
            return n


def test_four_bit_period():
    assert lfsr_period(0b1000, (4, 3)) == 15
    assert brute_force_cycle(0b1000, (4, 3)) == 15


@pytest.mark.parametrize("taps,period", [((4, 3), 15), ((5, 3), 31), ((8, 6, 5, 4), 255), ((16, 15, 13, 4), 65535)])
def test_maximal_taps(taps, period):
    assert lfsr_period(1, taps) == period


def test_every_nonzero_state_on_one_cycle():
    for s in range(1, 16):
        assert lfsr_period(s, (4, 3)) == brute_force_cycle(s, (4, 3)) == 15


def test_output_recurrence_four_bit():
    bits, _ = lfsr_next_bits(0b1000, (4, 3), 60)
    assert all(bits[n + 4] == bits[n] ^ bits[n + 1] for n in range(56))


def test_output_recurrence_32_bit():
    # tap t reads stage 32 - t, so s[n+32] = s[n] ^ s[n+10] ^ s[n+30] ^ s[n+31]
    bits, _ = lfsr_next_bits(0xDEADBEEF, TAPS_32, 500)
    b = bits.astype(int)
    for n in range(len(b) - 32):
        assert b[n + 32] == b[n] ^ b[n + 10] ^ b[n + 30] ^ b[n + 31]


def test_output_sequence_has_balanced_period():
    bits, state = lfsr_next_bits(0b1000, (4, 3), 15)
    assert state == 0b1000
    assert bits.sum() == 8  # 2^(k-1) ones per period


def test_zero_state_rejected():
    with pytest.raises(LfsrError):
        lfsr_next_bits(0, (4, 3), 1)
    with pytest.raises(LfsrError):
        LfsrBitGenerator(0)


def test_oversized_state_rejected():
    with pytest.raises(LfsrError):
        lfsr_next_bits(1 << 4, (4, 3), 1)


def test_generators_with_same_seed_agree():
    a, b = LfsrBitGenerator.from_seed(77), LfsrBitGenerator.from_seed(77)
    assert np.array_equal(a.bits(1000), b.bits(1000))
    assert not np.array_equal(LfsrBitGenerator.from_seed(78).bits(1000), LfsrBitGenerator.from_seed(77).bits(1000))


@given(state=st.integers(1, 2**32 - 1), n=st.integers(0, 64), m=st.integers(0, 64))
def test_chunking_does_not_change_stream(state, n, m):
    whole, s_whole = lfsr_next_bits(state, TAPS_32, n + m)
    first, s1 = lfsr_next_bits(state, TAPS_32, n)
    second, s2 = lfsr_next_bits(s1, TAPS_32, m)
    assert np.array_equal(whole, np.concatenate([first, second]))
    assert s_whole == s2


def test_constant_basis_generator():
    g = ConstantBasisGenerator(np.random.default_rng(0), basis=1)
    bits = g.bits(200)
    assert (bits[0::2] == 1).all()
    assert 0 < bits[1::2].mean() < 1
