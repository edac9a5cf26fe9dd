"""Build model objects from a RunConfig and run the experiments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .hbt import (
    CorrelationHistogram,
    PeakFit,
    PeakReport,
    build_histogram,
    fit_peaks,
    normalize_peak_areas,
    simulate_streams,
)
from .lfsr import LfsrBitGenerator, NumpyBitGenerator
from .optics import (
    AliceConfig,
    BobConfig,
    ChannelConfig,
    dynamic_error_for_qber,
    gate_fractions,
    simulate_link,
)
from .protocol import SessionOptions, SessionResult, run_session
from .rng import substream
from .security import LinkModel, OperatingPoint, SmConvention
from .source import SourceKind, SourceModel, multiphoton_probability


def gate_width(cfg: RunConfig) -> float:
    return cfg.bob.wcp_gate_width_ns if cfg.source.kind == "wcp" else cfg.bob.gate_width_ns


def output_source(cfg: RunConfig) -> SourceModel:
    s = cfg.source
    c = s.suppression_c if s.kind == "spp" else 1.0
    return SourceModel(SourceKind(s.kind), s.mu, c, s.lifetime_ns, s.pulse_period_ns)


def build_link_model(cfg: RunConfig) -> LinkModel:
    s, b = cfg.source, cfg.bob
    gate = gate_width(cfg)
    if s.kind == "spp":
        eta_g, beta_g = gate_fractions(gate, s.lifetime_ns, s.pulse_period_ns)
    else:
        eta_g, beta_g = 1.0, gate / s.pulse_period_ns
    darks = b.dark_h_hz + b.dark_v_hz + b.dark_l_hz + b.dark_r_hz
    return LinkModel(
        kind=SourceKind(s.kind),
        mu=s.mu,
        suppression_c=s.suppression_c if s.kind == "spp" else 1.0,
        detection_efficiency=b.apd_efficiency * b.receiver_transmission,
        dark_click_probability=darks * gate * 1e-9,
        misalignment=(b.pol_error_hv + b.pol_error_lr) / 2,
        eta_g=eta_g,
        beta_g=beta_g,
        loss_db=cfg.channel.loss_db,
        f_e=cfg.distill.f_e,
        s_m_convention=SmConvention(cfg.security.s_m_convention),
        s_m_direct=cfg.security.s_m_direct,
        pulse_rate_hz=s.pulse_rate_hz,
    )


def build_bob(cfg: RunConfig) -> BobConfig:
    b = cfg.bob
    return BobConfig(
        apd_efficiency=b.apd_efficiency,
        dark_rates_hz={"H": b.dark_h_hz, "V": b.dark_v_hz, "L": b.dark_l_hz, "R": b.dark_r_hz},
        gate_width_ns=gate_width(cfg),
        pol_error_hv=b.pol_error_hv,
        pol_error_lr=b.pol_error_lr,
        double_click_policy=b.double_click_policy,
        receiver_transmission=b.receiver_transmission,
    )


def build_stations(cfg: RunConfig, seed: int) -> tuple[AliceConfig, ChannelConfig, BobConfig]:
    s, a = cfg.source, cfg.alice
    if a.bit_generator == "lfsr":
        bits = LfsrBitGenerator.from_seed(seed)
    else:
        bits = NumpyBitGenerator(substream(seed, "alice.bits"))
    c = s.suppression_c if s.kind == "spp" else 1.0
    alice = AliceConfig.for_output_mu(s.kind, s.mu, c, a.t_eom, s.lifetime_ns, s.pulse_period_ns,
                                      bit_generator=bits)
    channel = ChannelConfig(cfg.channel.loss_db)
    bob = build_bob(cfg)
    if a.target_qber > 0:
        alice.dynamic_error = dynamic_error_for_qber(a.target_qber, alice, channel, bob)
    return alice, channel, bob


def session_options(cfg: RunConfig) -> SessionOptions:
    if cfg.security.s_m_convention == "direct":
        s_m = cfg.security.s_m_direct
    else:
        s_m = multiphoton_probability(output_source(cfg))
    p = cfg.protocol
    return SessionOptions(qber_mode=p.qber_mode, sample_fraction=p.sample_fraction, qber_prior=p.qber_prior,
                          pa_mode=cfg.distill.pa_mode, f_e=cfg.distill.f_e, s_m=s_m,
                          pulse_rate_hz=cfg.source.pulse_rate_hz)


def run_one_session(cfg: RunConfig, seed: int) -> SessionResult:
    alice, channel, bob = build_stations(cfg, seed)
    records = simulate_link(alice, channel, bob, cfg.protocol.slots, substream(seed, "optics"))
    return run_session(records, seed, session_options(cfg), transport=cfg.run.transport)


@dataclass
class SessionBatch:
    """Repeated sessions; repetition ``i`` runs with seed ``seed + i``."""

    seed: int
    summaries: list[dict] = field(default_factory=list)
    first: SessionResult | None = None

    def aggregate(self) -> dict:
        s = self.summaries
        done = [x for x in s if x["phase"] == "DONE"]
        mean = lambda key, rows: float(np.mean([x[key] for x in rows])) if rows else float("nan")  # noqa: E731
        qbers = [x["qber"] for x in done if x["qber"] == x["qber"]]
        return {
            "repetitions": len(s),
            "completed": len(done),
            "mean_accepted": mean("accepted", s),
            "mean_sifted": mean("sifted", s),
            "mean_sifted_rate_hz": mean("sifted_rate_hz", s),
            "mean_qber": float(np.mean(qbers)) if qbers else float("nan"),
            "mean_final_bits": mean("final_bits", s),
            "mean_secret_rate_hz": mean("secret_rate_hz", s),
            "mean_G_empirical": mean("G_empirical", s),
        }


def run_sessions(cfg: RunConfig, seed: int | None = None, repetitions: int | None = None) -> SessionBatch:
    seed = cfg.run.seed if seed is None else seed
    reps = cfg.protocol.repetitions if repetitions is None else repetitions
    batch = SessionBatch(seed)
    for i in range(reps):
        result = run_one_session(cfg, seed + i)
        batch.summaries.append(result.summary())
        if batch.first is None:
            batch.first = result
    return batch


def evalg_point(cfg: RunConfig) -> OperatingPoint:
    g = cfg.evalg
    return OperatingPoint(g.p_exp, g.s_m, g.e, g.f_e, cfg.source.pulse_rate_hz)


@dataclass
class HbtRun:
    histogram: CorrelationHistogram
    areas: list[PeakReport]
    fit: PeakFit | None


def analyse_hbt(hist: CorrelationHistogram, fit: bool = True) -> HbtRun:
    peak_fit = fit_peaks(hist) if fit else None
    return HbtRun(hist, normalize_peak_areas(hist, peak_fit), peak_fit)


def simulate_hbt(cfg: RunConfig, seed: int | None = None) -> HbtRun:
    seed = cfg.run.seed if seed is None else seed
    h = cfg.hbt
    s1, s2 = simulate_streams(output_source(cfg), h.rate_hz, h.duration_s, substream(seed, "hbt"),
                              background_hz=h.background_hz)
    hist = build_histogram(s1, s2, h.bin_width_ns, h.range_ns, cfg.source.pulse_period_ns)
    # WCP peaks are single-bin spikes; a fit has nothing to resolve there
    return analyse_hbt(hist, fit=h.fit and cfg.source.kind == "spp")
