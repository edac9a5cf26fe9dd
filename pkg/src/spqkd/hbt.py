"""Two-detector intensity correlation (Hanbury-Brown and Twiss) analysis.

A beam splitter sends each photon to detector 1 or 2. The histogram of all
pairwise delays t2 - t1 shows one peak per pulse period; after normalising by
the rate of accidental coincidences, side peaks have unit area and the area of
the zero-delay peak estimates the multiphoton suppression C.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np
from scipy.optimize import least_squares

from . import experiment as ref
from .source import SourceModel, emission_offsets, photon_number_pmf


@dataclass
class TimestampStream:
    detector: int
    times_ns: np.ndarray
    duration_s: float

    def __post_init__(self):
        self.times_ns = np.asarray(self.times_ns, dtype=np.float64)
        if self.detector not in (1, 2):
            raise ValueError("detector id must be 1 or 2")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        t = self.times_ns
        if t.size and (t[0] < 0 or t[-1] > self.duration_s * 1e9 or np.any(np.diff(t) < 0)):
            raise ValueError("times must be sorted and lie within [0, duration]")

    @property
    def rate_hz(self) -> float:
        return self.times_ns.size / self.duration_s

    def thinned(self, keep: float, rng: np.random.Generator) -> "TimestampStream":
        mask = rng.random(self.times_ns.size) < keep
        return TimestampStream(self.detector, self.times_ns[mask], self.duration_s)


# -- simulation -----------------------------------------------------------------

def simulate_streams(source: SourceModel, rate_per_detector_hz: float, duration_s: float,
                     rng: np.random.Generator, background_hz: float = 0.0,
                     ) -> tuple[TimestampStream, TimestampStream]:
    """Detector streams behind a 50/50 splitter for a pulsed source.

    Losses thin the photon-number law without changing C, so the source is
    rescaled to the mean detected photon number per pulse that produces
    ``rate_per_detector_hz`` at each detector. Only pulses carrying at least one
    detected photon are drawn, as geometric gaps in the pulse index. Each
    detector reports at most one click per pulse (the earliest photon).
    """
    period = source.pulse_period_ns
    n_pulses = int(duration_s * 1e9 / period)
    mu_det = 2 * rate_per_detector_hz * period * 1e-9
    model = dataclasses.replace(source, mu=mu_det)
    pmf = photon_number_pmf(model)
    p_any = 1 - pmf[0]
    pulses = _occupied_pulses(n_pulses, p_any, rng)
    counts = rng.choice(np.arange(1, pmf.size), size=pulses.size, p=pmf[1:] / p_any)
    owner = np.repeat(pulses, counts)
    det = rng.integers(1, 3, size=owner.size)
    t = owner * period + emission_offsets(model, owner.size, rng)

    streams = []
    for d in (1, 2):
        sel = det == d
        o, ts = owner[sel], t[sel]
        order = np.lexsort((ts, o))
        o, ts = o[order], ts[order]
        first = np.ones(o.size, dtype=bool)
        first[1:] = o[1:] != o[:-1]
        ts = ts[first]
        if background_hz > 0:
            nb = rng.poisson(background_hz * duration_s)
            ts = np.concatenate([ts, rng.uniform(0, duration_s * 1e9, nb)])
        ts = np.sort(ts)
        ts = ts[ts <= duration_s * 1e9]
        streams.append(TimestampStream(d, ts, duration_s))
    return streams[0], streams[1]


def _occupied_pulses(n_pulses: int, p: float, rng: np.random.Generator) -> np.ndarray:
    if p <= 0 or n_pulses == 0:
        return np.zeros(0, dtype=np.int64)
    expected = n_pulses * p
    chunks, last = [], -1
    while True:
        size = int(expected + 6 * math.sqrt(expected) + 16)
        idx = last + np.cumsum(rng.geometric(p, size=size))
        chunks.append(idx[idx < n_pulses])
        if idx[-1] >= n_pulses:
            return np.concatenate(chunks)
        last = int(idx[-1])


# -- histogram ------------------------------------------------------------------

@dataclass
class CorrelationHistogram:
    bin_width_ns: float
    edges_ns: np.ndarray
    counts: np.ndarray
    rate1_hz: float
    rate2_hz: float
    duration_s: float
    pulse_period_ns: float

    @property
    def centers_ns(self) -> np.ndarray:
        return 0.5 * (self.edges_ns[:-1] + self.edges_ns[1:])

    @property
    def range_ns(self) -> float:
        return float(self.edges_ns[-1])

    @property
    def accidental_per_ns(self) -> float:
        """Expected uncorrelated coincidences per ns of delay."""
        return self.rate1_hz * self.rate2_hz * self.duration_s * 1e-9

    def write_csv(self, fh: IO[str], comments: dict | None = None) -> None:
        meta = {"bin_width_ns": self.bin_width_ns, "rate1_hz": self.rate1_hz, "rate2_hz": self.rate2_hz,
                "duration_s": self.duration_s, "pulse_period_ns": self.pulse_period_ns}
        meta.update(comments or {})
        for k, v in meta.items():
            fh.write(f"# {k}: {v}\n")
        fh.write("delay_ns,count\n")
        for c, n in zip(self.centers_ns, self.counts):
            fh.write(f"{c:.6g},{int(n)}\n")


def pair_delays(t1: np.ndarray, t2: np.ndarray, max_delay_ns: float, chunk: int = 1 << 18) -> np.ndarray:
    """All delays t2 - t1 with |t2 - t1| <= max_delay_ns (not only nearest neighbours)."""
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    out = []
    for s in range(0, t1.size, chunk):
        a = t1[s:s + chunk]
        lo = np.searchsorted(t2, a - max_delay_ns, side="left")
        hi = np.searchsorted(t2, a + max_delay_ns, side="right")
        n = hi - lo
        total = int(n.sum())
        if total == 0:
            continue
        rows = np.repeat(np.arange(a.size), n)
        within = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
        out.append(t2[lo[rows] + within] - a[rows])
    return np.concatenate(out) if out else np.zeros(0)


def build_histogram(s1: TimestampStream, s2: TimestampStream, bin_width_ns: float = 1.0,
                    range_ns: float | None = None, pulse_period_ns: float = ref.PULSE_PERIOD_NS,
                    ) -> CorrelationHistogram:
    """Histogram of t2 - t1 over all pairs, on bins symmetric about zero delay.

    The half-range is rounded up to a whole number of bins; the default covers
    peaks -2..2. Bins are half-open except the last, so the total equals the
    number of pairs with |delay| <= half-range.
    """
    if bin_width_ns <= 0:
        raise ValueError("bin width must be positive")
    if range_ns is None:
        range_ns = 2.5 * pulse_period_ns
    half_bins = math.ceil(range_ns / bin_width_ns - 1e-9)
    edges = np.arange(-half_bins, half_bins + 1) * bin_width_ns
    span = half_bins * bin_width_ns
    d = pair_delays(s1.times_ns, s2.times_ns, span)
    # compare against the edges themselves; (d + span) / width rounds near-edge delays
    idx = np.searchsorted(edges, d, side="right") - 1
    idx = np.minimum(idx, 2 * half_bins - 1)  # last bin is closed so every pair is counted
    counts = np.bincount(idx, minlength=2 * half_bins)
    duration = max(s1.duration_s, s2.duration_s)
    return CorrelationHistogram(bin_width_ns, edges, counts, s1.times_ns.size / duration,
                                s2.times_ns.size / duration, duration, pulse_period_ns)


# -- peaks --------------------------------------------------------------------------

@dataclass
class PeakReport:
    index: int
    center_ns: float
    area: float  # normalised
    amplitude: float = math.nan  # fitted peak height, counts per ns
    lifetime_ns: float = math.nan
    background: float = math.nan  # counts per ns
    flagged: bool = False


@dataclass
class PeakFit:
    peaks: list[PeakReport]
    background: float
    residual_rms: float
    converged: bool
    message: str = ""

    @property
    def mean_lifetime_ns(self) -> float:
        return float(np.mean([p.lifetime_ns for p in self.peaks]))


def peak_indices(hist: CorrelationHistogram) -> list[int]:
    """Peaks whose full ±period/2 window lies inside the histogram."""
    k_max = int(math.floor(hist.range_ns / hist.pulse_period_ns - 0.5 + 1e-9))
    return list(range(-k_max, k_max + 1))


def _window_counts(hist: CorrelationHistogram, lo: float, hi: float) -> float:
    e = hist.edges_ns
    overlap = np.clip(np.minimum(hi, e[1:]) - np.maximum(lo, e[:-1]), 0, None) / hist.bin_width_ns
    return float(np.dot(overlap, hist.counts))


def _laplace_mass(center: float, tau: float, lo: np.ndarray | float, hi: np.ndarray | float):
    """Integral of exp(-|t - center| / tau) over [lo, hi]."""
    def cdf(x):
        z = (np.asarray(x, dtype=float) - center) / tau
        return np.where(z < 0, tau * np.exp(np.minimum(z, 0)), 2 * tau - tau * np.exp(-np.maximum(z, 0)))
    return cdf(hi) - cdf(lo)


def normalize_peak_areas(hist: CorrelationHistogram, fit: PeakFit | None = None) -> list[PeakReport]:
    """Coincidences within ±period/2 of each peak over the accidental level N1 N2 T_period T_acq.

    With a ``fit``, counts each peak's exponential spills into its neighbours'
    windows are moved back to the peak they belong to.
    """
    if hist.rate1_hz <= 0 or hist.rate2_hz <= 0 or hist.duration_s <= 0:
        raise ValueError("normalisation needs nonzero rates and duration")
    period = hist.pulse_period_ns
    norm = hist.accidental_per_ns * period
    fitted = {p.index: p for p in fit.peaks} if fit is not None else {}
    reports = []
    for k in peak_indices(hist):
        lo, hi = (k - 0.5) * period, (k + 0.5) * period
        raw = _window_counts(hist, lo, hi)
        if fitted:
            own = fitted.get(k)
            if own is not None:
                total = 2 * own.lifetime_ns * own.amplitude
                raw += total - own.amplitude * float(_laplace_mass(k * period, own.lifetime_ns, lo, hi))
            for j, other in fitted.items():
                if j != k:
                    raw -= other.amplitude * float(_laplace_mass(j * period, other.lifetime_ns, lo, hi))
        rep = fitted.get(k)
        reports.append(PeakReport(k, k * period, max(0.0, raw / norm),
                                  rep.amplitude if rep else math.nan,
                                  rep.lifetime_ns if rep else math.nan,
                                  fit.background if fit else math.nan,
                                  rep.flagged if rep else False))
    return reports


def peak_model(edges_ns: np.ndarray, period_ns: float, indices: Iterable[int], amplitudes, lifetimes,
               background: float) -> np.ndarray:
    """Expected counts per bin for B + sum_k A_k exp(-|t - k T| / tau_k), integrated over each bin."""
    lo, hi = edges_ns[:-1], edges_ns[1:]
    out = background * (hi - lo)
    for k, a, tau in zip(indices, amplitudes, lifetimes):
        out = out + a * _laplace_mass(k * period_ns, tau, lo, hi)
    return out


def fit_peaks(hist: CorrelationHistogram, period_ns: float | None = None,
              initial_lifetime_ns: float = ref.LIFETIME_NS, max_nfev: int = 2000) -> PeakFit:
    """Joint unweighted least-squares fit of every peak over a flat background."""
    period = period_ns if period_ns is not None else hist.pulse_period_ns
    ks = peak_indices(hist)
    if len(ks) < 3:
        raise ValueError("need at least three peaks in range")
    counts = hist.counts.astype(float)
    width = hist.bin_width_ns
    b0 = max(float(np.percentile(counts, 10)) / width, 0.0)
    a0 = []
    for k in ks:
        lo, hi = (k - 0.5) * period, (k + 0.5) * period
        excess = _window_counts(hist, lo, hi) - b0 * period
        a0.append(max(excess, 0.0) / (2 * initial_lifetime_ns) + 1e-9)
    n = len(ks)
    tau_min, tau_max = 0.05 * width, 2 * period
    x0 = np.concatenate([a0, np.full(n, initial_lifetime_ns), [b0]])
    lower = np.concatenate([np.zeros(n), np.full(n, tau_min), [0.0]])
    upper = np.concatenate([np.full(n, np.inf), np.full(n, tau_max), [np.inf]])
    x0 = np.clip(x0, lower, np.where(np.isinf(upper), x0, upper))

    def residual(x):
        return peak_model(hist.edges_ns, period, ks, x[:n], x[n:2 * n], x[-1]) - counts

    sol = least_squares(residual, x0, bounds=(lower, upper), max_nfev=max_nfev, x_scale="jac")
    amps, taus, bg = sol.x[:n], sol.x[n:2 * n], float(sol.x[-1])
    converged = bool(sol.success)
    peaks = []
    for k, a, tau in zip(ks, amps, taus):
        at_bound = bool(np.isclose(tau, tau_min) or np.isclose(tau, tau_max))
        peaks.append(PeakReport(k, k * period, math.nan, float(a), float(tau), bg,
                                flagged=not converged or (at_bound and a > 0)))
    rms = float(np.sqrt(np.mean(sol.fun**2)))
    fit = PeakFit(peaks, bg, rms, converged, sol.message)
    norm = hist.accidental_per_ns * period
    for p in fit.peaks:
        p.area = 2 * p.amplitude * p.lifetime_ns / norm
    return fit


def central_area(reports: list[PeakReport]) -> float:
    for r in reports:
        if r.index == 0:
            return r.area
    raise ValueError("no zero-delay peak in range")


# -- file formats -------------------------------------------------------------------

def write_timestamps(fh: IO[str], streams: Iterable[TimestampStream]) -> None:
    """One ``detector time_ns`` pair per line, merged in time order."""
    streams = list(streams)
    duration = max(s.duration_s for s in streams)
    fh.write(f"# duration_s: {duration!r}\n")
    det = np.concatenate([np.full(s.times_ns.size, s.detector) for s in streams])
    t = np.concatenate([s.times_ns for s in streams])
    order = np.argsort(t, kind="stable")
    for d, x in zip(det[order], t[order]):
        fh.write(f"{d} {float(x)!r}\n")


def read_timestamps(fh: IO[str], duration_s: float | None = None) -> dict[int, TimestampStream]:
    dets, times = [], []
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            if key.strip() == "duration_s" and duration_s is None:
                duration_s = float(value)
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'detector time_ns'")
        dets.append(int(parts[0]))
        times.append(float(parts[1]))
    dets_a, times_a = np.array(dets, dtype=int), np.array(times, dtype=float)
    if duration_s is None:
        duration_s = float(times_a.max()) * 1e-9 if times_a.size else 1.0
    out = {}
    for d in (1, 2):
        out[d] = TimestampStream(d, np.sort(times_a[dets_a == d]), duration_s)
    return out

