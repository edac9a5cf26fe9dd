import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spqkd import experiment as ref
from spqkd.hbt import (
    CorrelationHistogram,
    TimestampStream,
    build_histogram,
    central_area,
    fit_peaks,
    normalize_peak_areas,
    pair_delays,
    peak_model,
    read_timestamps,
    simulate_streams,
    write_timestamps,
)
from spqkd.source import SourceKind, SourceModel

PERIOD = ref.PULSE_PERIOD_NS


def brute_force_histogram(t1, t2, edges):
    d = (np.asarray(t2)[None, :] - np.asarray(t1)[:, None]).ravel()
    span = edges[-1]
    d = d[np.abs(d) <= span]
    counts = np.zeros(edges.size - 1, dtype=int)
    for x in d:
        i = np.searchsorted(edges, x, side="right") - 1
        counts[min(i, counts.size - 1)] += 1
    return counts


def test_single_pair_lands_in_plus_ten_bin():
    h = build_histogram(TimestampStream(1, [0.0], 1.0), TimestampStream(2, [10.0], 1.0), 1.0, 50.0)
    assert h.counts.sum() == 1
    assert h.edges_ns[np.argmax(h.counts)] == 10.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 2000), max_size=40), st.lists(st.floats(0, 2000), max_size=40),
       st.sampled_from([0.5, 1.0, 3.0]), st.floats(5, 400))
def test_histogram_matches_brute_force(a, b, width, span):
    t1, t2 = np.sort(a), np.sort(b)
    h = build_histogram(TimestampStream(1, t1, 1e-5), TimestampStream(2, t2, 1e-5), width, span)
    assert np.array_equal(h.counts, brute_force_histogram(t1, t2, h.edges_ns))
    half = h.range_ns
    pairs = int(np.sum(np.abs(t2[None, :] - t1[:, None]) <= half))
    assert h.counts.sum() == pairs


def test_pair_delays_chunking():
    rng = np.random.default_rng(0)
    t1, t2 = np.sort(rng.uniform(0, 1e5, 500)), np.sort(rng.uniform(0, 1e5, 500))
    assert np.array_equal(np.sort(pair_delays(t1, t2, 300, chunk=7)), np.sort(pair_delays(t1, t2, 300)))


def test_stream_validation():
    with pytest.raises(ValueError):
        TimestampStream(3, [], 1.0)
    with pytest.raises(ValueError):
        TimestampStream(1, [2.0, 1.0], 1.0)
    with pytest.raises(ValueError):
        TimestampStream(1, [2e9], 1.0)


def test_perfect_single_photons_leave_no_central_peak():
    src = SourceModel(SourceKind.SPP, 0.1, 0.0, ref.LIFETIME_NS, PERIOD)
    s1, s2 = simulate_streams(src, 5e4, 2.0, np.random.default_rng(1))
    h = build_histogram(s1, s2)
    # no pair within one pulse, so only neighbour tails reach the central window
    centre = h.counts[np.abs(h.centers_ns) < PERIOD / 4]
    assert centre.sum() <= 2
    areas = normalize_peak_areas(h, fit_peaks(h))
    assert central_area(areas) < 0.01
    assert all(abs(r.area - 1) < 0.15 for r in areas if r.index)


def test_coherent_pulses_have_unit_peaks():
    src = SourceModel(SourceKind.WCP, 0.1, 1.0, ref.LIFETIME_NS, PERIOD)
    s1, s2 = simulate_streams(src, 5e4, 4.0, np.random.default_rng(2))
    areas = [r.area for r in normalize_peak_areas(build_histogram(s1, s2))]
    assert all(abs(a - 1) < 0.05 for a in areas)


def test_uncorrelated_streams_are_flat():
    rng = np.random.default_rng(3)
    dur = 2.0
    s1 = TimestampStream(1, np.sort(rng.uniform(0, dur * 1e9, 1_000_000)), dur)
    s2 = TimestampStream(2, np.sort(rng.uniform(0, dur * 1e9, 1_000_000)), dur)
    # about 9.4e4 accidentals per window, so 1.5% is beyond 4 sigma
    areas = [r.area for r in normalize_peak_areas(build_histogram(s1, s2))]
    assert all(abs(a - 1) < 0.015 for a in areas)


def test_normalisation_survives_thinning():
    rng = np.random.default_rng(4)
    src = SourceModel(SourceKind.SPP, 0.1, ref.SUPPRESSION_C, ref.LIFETIME_NS, PERIOD)
    s1, s2 = simulate_streams(src, 1e5, 10.0, rng)
    full = normalize_peak_areas(build_histogram(s1, s2))
    thin = normalize_peak_areas(build_histogram(s1.thinned(0.5, rng), s2.thinned(0.5, rng)))
    for a, b in zip(full, thin):
        assert abs(a.area - b.area) < 0.08


def test_zero_rate_rejected():
    h = build_histogram(TimestampStream(1, [], 1.0), TimestampStream(2, [1.0], 1.0))
    with pytest.raises(ValueError):
        normalize_peak_areas(h)


def synthetic_histogram(amplitudes, tau, background, width=1.0, noise_rng=None):
    edges = np.arange(-469, 470) * width
    ks = range(-2, 3)
    mean = peak_model(edges, PERIOD, ks, amplitudes, [tau] * 5, background)
    counts = noise_rng.poisson(mean) if noise_rng is not None else np.round(mean).astype(int)
    # rates chosen so the accidental peak area is 2 A tau
    norm = 2 * amplitudes[1] * tau
    rate = np.sqrt(norm / (PERIOD * 1e-9))
    return CorrelationHistogram(width, edges, counts, rate, rate, 1.0, PERIOD)


def test_noiseless_fit_recovers_lifetime():
    amps = [100.0, 100.0, 5.0, 100.0, 100.0]
    fit = fit_peaks(synthetic_histogram(amps, 23.0, 2.0))
    assert fit.converged
    for p in fit.peaks:
        assert p.lifetime_ns == pytest.approx(23.0, abs=0.5)
    assert fit.background == pytest.approx(2.0, abs=0.1)


def test_flat_histogram_fits_background_only():
    edges = np.arange(-469, 470) * 1.0
    counts = np.random.default_rng(5).poisson(50.0, edges.size - 1)
    h = CorrelationHistogram(1.0, edges, counts, 1e4, 1e4, 1.0, PERIOD)
    fit = fit_peaks(h)
    assert fit.background == pytest.approx(counts.mean(), rel=0.02)
    # any peak the fit invents stays within the noise of one window
    window_sigma = np.sqrt(fit.background * PERIOD)
    assert all(2 * p.amplitude * p.lifetime_ns < 4 * window_sigma for p in fit.peaks)


def test_tail_correction_recovers_central_area():
    # long lifetime so neighbours spill noticeably into the central window
    amps = [200.0, 200.0, 20.0, 200.0, 200.0]
    h = synthetic_histogram(amps, 40.0, 0.0)
    raw = central_area(normalize_peak_areas(h))
    corrected = central_area(normalize_peak_areas(h, fit_peaks(h)))
    assert raw > 0.15
    assert corrected == pytest.approx(0.1, abs=0.002)


def test_fit_reconstructs_valleys():
    src = SourceModel(SourceKind.SPP, 0.1, ref.SUPPRESSION_C, ref.LIFETIME_NS, PERIOD)
    s1, s2 = simulate_streams(src, 1e5, 20.0, np.random.default_rng(6))
    h = build_histogram(s1, s2)
    fit = fit_peaks(h)
    model = peak_model(h.edges_ns, PERIOD, [p.index for p in fit.peaks], [p.amplitude for p in fit.peaks],
                       [p.lifetime_ns for p in fit.peaks], fit.background)
    for k in (-1.5, -0.5, 0.5, 1.5):
        valley = np.abs(h.centers_ns - k * PERIOD) < 10
        assert model[valley].sum() == pytest.approx(h.counts[valley].sum(), rel=0.10)
    assert fit.mean_lifetime_ns == pytest.approx(ref.LIFETIME_NS, rel=0.10)


def test_timestamp_file_round_trip():
    rng = np.random.default_rng(7)
    s1 = TimestampStream(1, np.sort(rng.uniform(0, 1e9, 50)), 1.0)
    s2 = TimestampStream(2, np.sort(rng.uniform(0, 1e9, 60)), 1.0)
    buf = io.StringIO()
    write_timestamps(buf, [s1, s2])
    buf.seek(0)
    back = read_timestamps(buf)
    assert np.array_equal(back[1].times_ns, s1.times_ns)
    assert np.array_equal(back[2].times_ns, s2.times_ns)
    assert back[1].duration_s == 1.0


def test_timestamp_file_rejects_garbage():
    with pytest.raises(ValueError, match="line 2"):
        read_timestamps(io.StringIO("1 5.0\n1 2 3\n"))


def test_histogram_csv():
    h = build_histogram(TimestampStream(1, [0.0], 1.0), TimestampStream(2, [10.0], 1.0), 1.0, 20.0)
    buf = io.StringIO()
    h.write_csv(buf, {"seed": 3})
    lines = buf.getvalue().splitlines()
    assert "# seed: 3" in lines
    header = lines.index("delay_ns,count")
    rows = [tuple(map(float, r.split(","))) for r in lines[header + 1:]]
    assert len(rows) == 40 and sum(r[1] for r in rows) == 1
    assert (10.5, 1.0) in rows
