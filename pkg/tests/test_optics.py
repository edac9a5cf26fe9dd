import io
import math

import numpy as np
import pytest
from scipy import stats

from conftest import binomial_band
from spqkd import experiment as ref
from spqkd.lfsr import NumpyBitGenerator
from spqkd.optics import (
    AliceConfig,
    BobConfig,
    ChannelConfig,
    DoubleClickPolicy,
    LinkRecords,
    Polarization,
    alice_emit,
    alice_output_rate,
    bob_detect,
    channel_transmit,
    dark_fraction,
    dynamic_error_for_qber,
    expected_click_probabilities,
    expected_qber,
    gate_fractions,
    simulate_link,
    static_qber_estimate,
)
from spqkd.source import EmittedPulse, SourceKind, SourceModel


def reference_alice(seed=1, **kw):
    return AliceConfig.for_output_mu(SourceKind.SPP, ref.MU, ref.SUPPRESSION_C,
                                     bit_generator=NumpyBitGenerator(np.random.default_rng(seed)), **kw)


def test_polarization_bases():
    assert Polarization.H.basis == Polarization.V.basis == 0
    assert Polarization.L.basis == Polarization.R.basis == 1
    assert [p.bit for p in Polarization] == [0, 1, 0, 1]
    assert Polarization.encode(1, 1) is Polarization.R


def test_gate_fractions_reference():
    eta, beta = gate_fractions(50, 23, 187.5)
    assert eta == pytest.approx(1 - math.exp(-50 / 23), rel=1e-15)
    assert round(eta, 4) == 0.8863
    assert round(beta, 4) == 0.2667


def test_gate_fraction_limits():
    assert gate_fractions(187.5, 23, 187.5)[1] == 1.0
    assert gate_fractions(1e4, 23, 2e4)[0] == pytest.approx(1.0, abs=1e-12)


def test_lossless_encoder_keeps_source_mean():
    src = SourceModel.spp(0.05, 0.1)
    n = 400_000
    em = alice_emit(AliceConfig(src, t_eom=1.0, bit_generator=NumpyBitGenerator(np.random.default_rng(0))),
                    n, np.random.default_rng(1))
    counts = em.photons.photon_counts()
    assert abs(counts.mean() - 0.05) < 4 * math.sqrt(0.05 / n)


def test_sender_output_rate_formula():
    assert alice_output_rate(ref.ALICE_DETECTED_RATE, ref.T_EOM, ref.APD_EFFICIENCY) == pytest.approx(7.583e4, rel=1e-3)


def test_sender_output_rate_simulated():
    # emitter seen by control APDs at 7e4 /s, then EOM loss
    emitter_mu = ref.ALICE_DETECTED_RATE / (ref.APD_EFFICIENCY * ref.PULSE_RATE_HZ)
    alice = AliceConfig(SourceModel.spp(emitter_mu, ref.SUPPRESSION_C),
                        bit_generator=NumpyBitGenerator(np.random.default_rng(0)))
    n = 2_000_000
    em = alice_emit(alice, n, np.random.default_rng(2))
    rate = em.photons.photon_slot.size / n * ref.PULSE_RATE_HZ
    expected = alice_output_rate(ref.ALICE_DETECTED_RATE, ref.T_EOM, ref.APD_EFFICIENCY)
    sigma = math.sqrt(expected / ref.PULSE_RATE_HZ * n) / n * ref.PULSE_RATE_HZ
    assert abs(rate - expected) < 4 * sigma


def test_emission_is_deterministic():
    a = alice_emit(reference_alice(5), 1000, np.random.default_rng(3))
    b = alice_emit(reference_alice(5), 1000, np.random.default_rng(3))
    assert np.array_equal(a.prepared, b.prepared)
    assert np.array_equal(a.photons.photon_offset_ns, b.photons.photon_offset_ns)


def test_emission_rejects_empty():
    with pytest.raises(ValueError):
        alice_emit(reference_alice(), 0, np.random.default_rng(0))


def test_emission_iterates_pulses():
    em = alice_emit(reference_alice(), 10, np.random.default_rng(0))
    items = list(em)
    assert len(items) == 10
    pulse, pol, (basis, bit) = items[0]
    assert isinstance(pulse, EmittedPulse) and isinstance(pol, Polarization)
    assert pol.basis == basis


def test_zero_loss_leaves_pulse_alone():
    p = EmittedPulse(3, 2, [1.0, 5.0])
    out = channel_transmit(p, ChannelConfig(0.0), np.random.default_rng(0))
    assert out.photon_count == 2 and list(out.emission_offsets_ns) == [1.0, 5.0]


@pytest.mark.parametrize("loss_db,p", [(3.0103, 0.5), (12.5, 10 ** -1.25)])
def test_channel_survival(loss_db, p):
    n = 1_000_000
    batch = alice_emit(AliceConfig(SourceModel.wcp(1.0), t_eom=1.0,
                                   bit_generator=NumpyBitGenerator(np.random.default_rng(0))),
                       n, np.random.default_rng(4)).photons
    k = batch.photon_slot.size
    out = channel_transmit(batch, ChannelConfig(loss_db), np.random.default_rng(5))
    lo, hi = binomial_band(p, k, 3)
    assert lo <= out.photon_slot.size / k <= hi


def test_channel_preserves_offsets():
    p = EmittedPulse(0, 50, np.arange(50.0))
    out = channel_transmit(p, ChannelConfig(3.0), np.random.default_rng(0))
    assert set(out.emission_offsets_ns) <= set(range(50))


def test_single_photon_ideal_detection():
    bob = BobConfig(apd_efficiency=1.0, receiver_transmission=1.0, pol_error_hv=0, pol_error_lr=0,
                    dark_rates_hz={"H": 0, "V": 0, "L": 0, "R": 0}, hv_arm_probability=1.0)
    rec = bob_detect(EmittedPulse(7, 1, [10.0]), Polarization.V, bob, 187.5, np.random.default_rng(0))
    assert rec.slot_index == 7
    assert rec.clicks == {Polarization.V}
    assert rec.gated == {Polarization.V: True}
    assert rec.accepted_bit == (0, 1)


def test_late_photon_is_not_gated():
    bob = BobConfig(apd_efficiency=1.0, receiver_transmission=1.0, pol_error_hv=0, pol_error_lr=0,
                    dark_rates_hz={"H": 0, "V": 0, "L": 0, "R": 0}, hv_arm_probability=1.0)
    rec = bob_detect(EmittedPulse(0, 1, [60.0]), Polarization.H, bob, 187.5, np.random.default_rng(0))
    assert rec.clicks == {Polarization.H} and rec.gated == {Polarization.H: False}
    assert rec.accepted_bit is None


def test_gate_longer_than_period_rejected():
    with pytest.raises(ValueError):
        bob_detect(EmittedPulse(0, 0, []), Polarization.H, BobConfig(gate_width_ns=200), 187.5,
                   np.random.default_rng(0))


@pytest.mark.parametrize("kw", [{"apd_efficiency": 0}, {"pol_error_hv": 0.5}, {"gate_width_ns": -1},
                                {"dark_rates_hz": {"H": 1}}])
def test_bad_receiver_rejected(kw):
    with pytest.raises(ValueError):
        BobConfig(**kw)


@pytest.fixture(scope="module")
def reference_run():
    n = 10_000_000
    return n, simulate_link(reference_alice(11), ChannelConfig(), BobConfig(), n, np.random.default_rng(12))


def test_click_probability_matches_model(reference_run):
    n, rec = reference_run
    p = expected_click_probabilities(reference_alice(), ChannelConfig(), BobConfig())
    signal_any = np.mean(rec.masks.signal != 0)
    gated_any = np.mean(rec.masks.gated != 0)
    for observed, key in ((signal_any, "signal"), (gated_any, "gated")):
        lo, hi = binomial_band(p[key], n, 3)
        assert lo <= observed <= hi, key


def test_signal_click_probability_is_reference_p_exp():
    # the receiver transmission is calibrated on Bob's detected rate, so the
    # ungated signal click probability per pulse reproduces 7.4e-3
    p = expected_click_probabilities(reference_alice(), ChannelConfig(), BobConfig())
    assert p["signal"] == pytest.approx(ref.P_EXP, rel=0.01)


def test_sifted_error_matches_prediction(reference_run):
    _, rec = reference_run
    errors, sifted = rec.sifted_error_rate()
    e = expected_qber(reference_alice(), ChannelConfig(), BobConfig())
    assert abs(errors / sifted - e) < 3 * math.sqrt(e * (1 - e) / sifted)


def test_signal_clicks_never_exceed_photons(reference_run):
    _, rec = reference_run
    fired = np.array([bin(m).count("1") for m in range(16)])[rec.masks.signal]
    assert (fired <= rec.photons_sent).all()


def test_dark_only_rate():
    n = 4_000_000
    alice = AliceConfig(SourceModel.spp(0.0, 0.0), bit_generator=NumpyBitGenerator(np.random.default_rng(0)))
    rec = simulate_link(alice, ChannelConfig(), BobConfig(), n, np.random.default_rng(6))
    clicks = int(np.count_nonzero(rec.masks.dark))
    rate = clicks / (n * ref.PULSE_PERIOD_NS * 1e-9)
    expected = gate_fractions(50, 23, 187.5)[1] * sum(ref.DARK_RATES_HZ.values())
    assert expected == pytest.approx(232, abs=1)
    mean = expected * n * ref.PULSE_PERIOD_NS * 1e-9
    assert abs(clicks - mean) < 3 * math.sqrt(mean)
    assert rate > 0
    assert not rec.masks.signal.any()


def test_serial_losses_compose():
    n = 1_000_000
    bob = BobConfig()
    alice_kw = dict(kind=SourceKind.WCP, mu=0.5)

    def outcome(channels, seed):
        a = AliceConfig.for_output_mu(**alice_kw, bit_generator=NumpyBitGenerator(np.random.default_rng(seed)))
        rec = simulate_link(a, channels, bob, n, np.random.default_rng(seed + 1))
        return np.bincount(rec.masks.gated.astype(int), minlength=16)

    split = outcome([ChannelConfig(2.0), ChannelConfig(3.0)], 10)
    single = outcome(ChannelConfig(5.0), 20)
    table = np.array([split, single])
    table = table[:, table.sum(axis=0) > 0]
    assert stats.chi2_contingency(table).pvalue > 1e-3


def test_ideal_link_has_no_errors():
    bob = BobConfig(apd_efficiency=1.0, receiver_transmission=1.0, pol_error_hv=0, pol_error_lr=0,
                    dark_rates_hz={"H": 0, "V": 0, "L": 0, "R": 0}, gate_width_ns=187.5)
    for seed in range(3):
        a = AliceConfig.for_output_mu(SourceKind.SPP, 0.3, 0.1,
                                      bit_generator=NumpyBitGenerator(np.random.default_rng(seed)))
        rec = simulate_link(a, ChannelConfig(), bob, 50_000, np.random.default_rng(seed))
        errors, sifted = rec.sifted_error_rate()
        assert sifted > 1000 and errors == 0


def test_static_qber_composition():
    p_dark = dark_fraction(BobConfig(), ref.BOB_DETECTED_RATE, ref.PULSE_PERIOD_NS, ref.LIFETIME_NS)
    assert p_dark == pytest.approx(0.00666, abs=5e-5)
    e = static_qber_estimate(p_dark, ref.POL_ERROR_HV, ref.POL_ERROR_LR)
    assert 0.025 <= e <= 0.026


def test_dynamic_error_reaches_target():
    alice, ch, bob = reference_alice(), ChannelConfig(), BobConfig()
    alice.dynamic_error = dynamic_error_for_qber(ref.MEASURED_QBER, alice, ch, bob)
    assert expected_qber(alice, ch, bob) == pytest.approx(ref.MEASURED_QBER, rel=1e-12)
    with pytest.raises(ValueError):
        dynamic_error_for_qber(0.001, alice, ch, bob)


def test_random_assign_accepts_double_clicks():
    rng_seed = 30
    common = dict(apd_efficiency=1.0, receiver_transmission=1.0)
    a = lambda: AliceConfig.for_output_mu(SourceKind.WCP, 2.0,  # noqa: E731
                                          bit_generator=NumpyBitGenerator(np.random.default_rng(1)))
    drop = simulate_link(a(), ChannelConfig(), BobConfig(**common), 20_000, np.random.default_rng(rng_seed))
    keep = simulate_link(a(), ChannelConfig(),
                         BobConfig(double_click_policy=DoubleClickPolicy.RANDOM_ASSIGN, **common),
                         20_000, np.random.default_rng(rng_seed))
    assert np.array_equal(drop.masks.gated, keep.masks.gated)
    multi = np.array([bin(m).count("1") for m in range(16)])[keep.masks.gated] >= 2
    assert (drop.accepted[multi] == -1).all()
    assert (keep.accepted[multi] >= 0).all()
    assert all((keep.masks.gated[i] >> keep.accepted[i]) & 1 for i in np.flatnonzero(multi)[:200])


def test_slot_csv():
    rec = simulate_link(reference_alice(), ChannelConfig(), BobConfig(), 2000, np.random.default_rng(0))
    buf = io.StringIO()
    rec.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "slot,alice_basis,alice_bit,clicks,accepted_bit"
    assert len(lines) == 2001


def test_concat_preserves_records():
    a = reference_alice()
    rec = simulate_link(a, ChannelConfig(), BobConfig(), 3000, np.random.default_rng(0), batch_slots=1000)
    assert len(rec) == 3000
    assert np.array_equal(rec.slot_index, np.arange(3000))
    assert isinstance(rec, LinkRecords)
