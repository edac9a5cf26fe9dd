"""Monte Carlo optics chain: Alice's encoder, the lossy channel, Bob's passive receiver.

Bob splits incoming light 50/50 into an H-V arm and an L-R arm, each ending on
a polarising beam splitter and two APDs, so every slot can fire any subset of
the four detectors. Photons are simulated individually; slots are processed in
batches with the per-photon arrays flattened.

Channel indices: H=0, V=1, L=2, R=3. Basis = index // 2 (0 rectilinear,
1 circular), bit value = index % 2.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import IO, Iterator

import numpy as np

from . import experiment as ref
from .lfsr import LfsrBitGenerator
from .source import EmittedPulse, SourceKind, SourceModel, emission_offsets, photon_number_pmf, sample_photon_number


class Polarization(enum.IntEnum):
    H = 0
    V = 1
    L = 2
    R = 3

    @property
    def basis(self) -> int:
        return self.value >> 1

    @property
    def bit(self) -> int:
        return self.value & 1

    @classmethod
    def encode(cls, basis: int, bit: int) -> "Polarization":
        return cls(2 * basis + bit)


BASIS_NAMES = ("HV", "LR")


class DoubleClickPolicy(str, enum.Enum):
    DISCARD = "discard"
    RANDOM_ASSIGN = "random_assign"


def gate_fractions(gate_width_ns: float, lifetime_ns: float, pulse_period_ns: float) -> tuple[float, float]:
    """(eta_g, beta_g): kept fraction of emitter photons and of uniform background."""
    if not 0 < gate_width_ns <= pulse_period_ns:
        raise ValueError("need 0 < gate_width_ns <= pulse_period_ns")
    if lifetime_ns <= 0:
        raise ValueError("lifetime_ns must be positive")
    return -math.expm1(-gate_width_ns / lifetime_ns), gate_width_ns / pulse_period_ns


@dataclass
class AliceConfig:
    """Sender station.

    ``source`` is the emitter in front of the EOM; the light leaving the
    station is ``source.scaled(t_eom)``. ``dynamic_error`` flips the prepared
    state within its basis, standing in for the imperfect EOM drive pulses.
    """

    source: SourceModel
    t_eom: float = ref.T_EOM
    bit_generator: object = None
    dynamic_error: float = 0.0

    def __post_init__(self):
        if not 0 < self.t_eom <= 1:
            raise ValueError("t_eom must lie in (0, 1]")
        if not 0 <= self.dynamic_error < 0.5:
            raise ValueError("dynamic_error must lie in [0, 0.5)")
        if self.bit_generator is None:
            self.bit_generator = LfsrBitGenerator.from_seed(1)

    @classmethod
    def for_output_mu(cls, kind: SourceKind | str, mu: float, c: float = 1.0, t_eom: float = ref.T_EOM,
                      lifetime_ns: float = ref.LIFETIME_NS, pulse_period_ns: float = ref.PULSE_PERIOD_NS,
                      **kw) -> "AliceConfig":
        """Configure the emitter so that the station output has mean ``mu``."""
        emitter = SourceModel(SourceKind(kind), mu / t_eom, c, lifetime_ns, pulse_period_ns)
        return cls(emitter, t_eom, **kw)

    @property
    def output_source(self) -> SourceModel:
        return self.source.scaled(self.t_eom)


@dataclass
class ChannelConfig:
    loss_db: float = 0.0

    def __post_init__(self):
        if self.loss_db < 0:
            raise ValueError("loss_db must be >= 0")

    @property
    def transmittance(self) -> float:
        return 10 ** (-self.loss_db / 10)


def _default_darks() -> dict[str, float]:
    return dict(ref.DARK_RATES_HZ)


@dataclass
class BobConfig:
    """Receiver station.

    The APD efficiency is the value quoted for the sender's control APDs; no
    separate figure exists for the receiver, so it is reused here.
    ``receiver_transmission`` covers the receiver optics in front of the APDs.
    """

    apd_efficiency: float = ref.APD_EFFICIENCY
    dark_rates_hz: dict[str, float] = field(default_factory=_default_darks)
    gate_width_ns: float = ref.GATE_SPP_NS
    pol_error_hv: float = ref.POL_ERROR_HV
    pol_error_lr: float = ref.POL_ERROR_LR
    double_click_policy: DoubleClickPolicy = DoubleClickPolicy.DISCARD
    receiver_transmission: float = ref.RECEIVER_TRANSMISSION
    hv_arm_probability: float = 0.5

    def __post_init__(self):
        self.double_click_policy = DoubleClickPolicy(self.double_click_policy)
        if not 0 < self.apd_efficiency <= 1:
            raise ValueError("apd_efficiency must lie in (0, 1]")
        if not 0 < self.receiver_transmission <= 1:
            raise ValueError("receiver_transmission must lie in (0, 1]")
        if set(self.dark_rates_hz) != {"H", "V", "L", "R"}:
            raise ValueError("dark_rates_hz needs exactly the channels H, V, L, R")
        if any(d < 0 for d in self.dark_rates_hz.values()):
            raise ValueError("dark rates must be >= 0")
        if self.gate_width_ns <= 0:
            raise ValueError("gate_width_ns must be positive")
        for name in ("pol_error_hv", "pol_error_lr"):
            if not 0 <= getattr(self, name) < 0.5:
                raise ValueError(f"{name} must lie in [0, 0.5)")
        if not 0 <= self.hv_arm_probability <= 1:
            raise ValueError("hv_arm_probability must lie in [0, 1]")

    @property
    def detection_efficiency(self) -> float:
        return self.apd_efficiency * self.receiver_transmission

    def dark_probabilities(self) -> np.ndarray:
        """Per-channel probability of a dark click inside one gate."""
        rates = np.array([self.dark_rates_hz[p.name] for p in Polarization])
        return np.minimum(1.0, rates * self.gate_width_ns * 1e-9)

    def check_period(self, pulse_period_ns: float) -> None:
        if self.gate_width_ns > pulse_period_ns:
            raise ValueError("gate_width_ns exceeds the pulse period")


@dataclass
class PhotonBatch:
    """Photons of ``n_slots`` consecutive slots, flattened."""

    start_slot: int
    n_slots: int
    photon_slot: np.ndarray  # slot offset within the batch
    photon_offset_ns: np.ndarray

    def photon_counts(self) -> np.ndarray:
        return np.bincount(self.photon_slot, minlength=self.n_slots)

    def thinned(self, keep: np.ndarray) -> "PhotonBatch":
        return PhotonBatch(self.start_slot, self.n_slots, self.photon_slot[keep], self.photon_offset_ns[keep])

    @classmethod
    def from_pulse(cls, pulse: EmittedPulse) -> "PhotonBatch":
        return cls(pulse.slot_index, 1, np.zeros(pulse.photon_count, dtype=np.int64),
                   np.asarray(pulse.emission_offsets_ns, dtype=float))

    def to_pulses(self) -> list[EmittedPulse]:
        order = np.argsort(self.photon_slot, kind="stable")
        slots, offsets = self.photon_slot[order], self.photon_offset_ns[order]
        bounds = np.searchsorted(slots, np.arange(self.n_slots + 1))
        return [
            EmittedPulse(self.start_slot + i, int(bounds[i + 1] - bounds[i]),
                         offsets[bounds[i]:bounds[i + 1]].tolist())
            for i in range(self.n_slots)
        ]


@dataclass
class AliceEmission:
    photons: PhotonBatch
    basis: np.ndarray  # logged, uint8
    bit: np.ndarray  # logged, uint8
    prepared: np.ndarray  # channel index actually sent, after dynamic errors

    def __iter__(self) -> Iterator[tuple[EmittedPulse, Polarization, tuple[int, int]]]:
        for i, pulse in enumerate(self.photons.to_pulses()):
            yield pulse, Polarization(int(self.prepared[i])), (int(self.basis[i]), int(self.bit[i]))


def alice_emit(config: AliceConfig, n_slots: int, rng: np.random.Generator, start_slot: int = 0) -> AliceEmission:
    """Prepare ``n_slots`` pulses: basis and bit from the bit generator, photons from the source, EOM loss."""
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    raw = np.asarray(config.bit_generator.bits(2 * n_slots), dtype=np.uint8)
    basis, bit = raw[0::2], raw[1::2]
    value = bit.copy()
    if config.dynamic_error > 0:
        value ^= (rng.random(n_slots) < config.dynamic_error).astype(np.uint8)
    counts = sample_photon_number(config.source, rng, n_slots)
    photon_slot = np.repeat(np.arange(n_slots), counts)
    offsets = emission_offsets(config.source, photon_slot.size, rng)
    batch = PhotonBatch(start_slot, n_slots, photon_slot, offsets)
    if config.t_eom < 1:
        batch = batch.thinned(rng.random(photon_slot.size) < config.t_eom)
    return AliceEmission(batch, basis, bit, (2 * basis + value).astype(np.uint8))


def channel_transmit(pulse: EmittedPulse | PhotonBatch, config: ChannelConfig, rng: np.random.Generator):
    """Independent per-photon survival with probability 10^(-loss/10). Offsets are preserved."""
    batch = PhotonBatch.from_pulse(pulse) if isinstance(pulse, EmittedPulse) else pulse
    t = config.transmittance
    if t < 1:
        batch = batch.thinned(rng.random(batch.photon_slot.size) < t)
    if isinstance(pulse, EmittedPulse):
        return batch.to_pulses()[0]
    return batch


_POPCOUNT = np.array([bin(m).count("1") for m in range(16)], dtype=np.uint8)
_LOWBIT = np.array([(m & -m).bit_length() - 1 if m else -1 for m in range(16)], dtype=np.int8)
_SET_BITS = [tuple(c for c in range(4) if m >> c & 1) for m in range(16)]


@dataclass
class DetectionMasks:
    """Per-slot 4-bit channel masks."""

    signal: np.ndarray  # fired by a detected signal photon, at any time
    gated_signal: np.ndarray
    dark: np.ndarray  # dark clicks inside the gate
    accepted: np.ndarray  # channel index, -1 if none

    @property
    def gated(self) -> np.ndarray:
        return self.gated_signal | self.dark


def bob_detect_batch(photons: PhotonBatch, prepared: np.ndarray, config: BobConfig,
                     rng: np.random.Generator) -> DetectionMasks:
    n = photons.n_slots
    slot = photons.photon_slot
    k = slot.size
    arm = (rng.random(k) >= config.hv_arm_probability).astype(np.int64)
    sent = prepared[slot].astype(np.int64)
    sent_basis, sent_bit = sent >> 1, sent & 1
    pol_err = np.where(arm == 0, config.pol_error_hv, config.pol_error_lr)
    u = rng.random(k)
    value = np.where(arm == sent_basis, sent_bit ^ (u < pol_err), u < 0.5).astype(np.int64)
    channel = 2 * arm + value
    detected = rng.random(k) < config.detection_efficiency
    in_gate = photons.photon_offset_ns < config.gate_width_ns

    signal = np.zeros(n, dtype=np.uint8)
    gated_signal = np.zeros(n, dtype=np.uint8)
    np.bitwise_or.at(signal, slot[detected], (1 << channel[detected]).astype(np.uint8))
    hit = detected & in_gate
    np.bitwise_or.at(gated_signal, slot[hit], (1 << channel[hit]).astype(np.uint8))

    dark = np.zeros(n, dtype=np.uint8)
    for c, p in enumerate(config.dark_probabilities()):
        if p > 0:
            dark |= ((rng.random(n) < p).astype(np.uint8) << c)

    gated = gated_signal | dark
    count = _POPCOUNT[gated]
    accepted = np.where(count == 1, _LOWBIT[gated], -1).astype(np.int8)
    if config.double_click_policy is DoubleClickPolicy.RANDOM_ASSIGN:
        multi = np.flatnonzero(count >= 2)
        if multi.size:
            picks = rng.random(multi.size)
            for j, i in enumerate(multi):
                options = _SET_BITS[gated[i]]
                accepted[i] = options[int(picks[j] * len(options))]
    return DetectionMasks(signal, gated_signal, dark, accepted)


@dataclass(frozen=True)
class ClickRecord:
    slot_index: int
    clicks: frozenset[Polarization]
    gated: dict[Polarization, bool]
    accepted_bit: tuple[int, int] | None  # (basis, bit)


def bob_detect(pulse: EmittedPulse, sent: Polarization, config: BobConfig, pulse_period_ns: float,
               rng: np.random.Generator) -> ClickRecord:
    """Single-pulse detection; see ``bob_detect_batch``."""
    config.check_period(pulse_period_ns)
    masks = bob_detect_batch(PhotonBatch.from_pulse(pulse), np.array([int(sent)], dtype=np.uint8), config, rng)
    return _click_record(pulse.slot_index, masks.signal[0], masks.gated[0], int(masks.accepted[0]))


def _click_record(slot: int, signal: int, gated: int, accepted: int) -> ClickRecord:
    fired = int(signal) | int(gated)
    clicks = frozenset(p for p in Polarization if fired >> p & 1)
    return ClickRecord(
        slot,
        clicks,
        {p: bool(int(gated) >> p & 1) for p in clicks},
        None if accepted < 0 else (accepted >> 1, accepted & 1),
    )


@dataclass
class LinkRecords:
    """Slot log of a simulated link, structure-of-arrays."""

    slot_index: np.ndarray
    alice_basis: np.ndarray
    alice_bit: np.ndarray
    photons_sent: np.ndarray  # photons leaving Alice's station
    masks: DetectionMasks

    def __len__(self) -> int:
        return self.slot_index.size

    @property
    def accepted(self) -> np.ndarray:
        return self.masks.accepted

    def accepted_slots(self) -> np.ndarray:
        return np.flatnonzero(self.masks.accepted >= 0)

    def click_record(self, i: int) -> ClickRecord:
        m = self.masks
        return _click_record(int(self.slot_index[i]), m.signal[i], m.gated[i], int(m.accepted[i]))

    def sifted_error_rate(self) -> tuple[int, int]:
        """(errors, sifted bits) against Alice's log, without any classical exchange."""
        acc = self.accepted_slots()
        ch = self.masks.accepted[acc].astype(np.int64)
        keep = (ch >> 1) == self.alice_basis[acc]
        errors = int(np.count_nonzero((ch[keep] & 1) != self.alice_bit[acc][keep]))
        return errors, int(np.count_nonzero(keep))

    def write_csv(self, fh: IO[str]) -> None:
        """Debug dump: slot, alice_basis, alice_bit, clicks, accepted_bit."""
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "alice_basis", "alice_bit", "clicks", "accepted_bit"])
        for i in range(len(self)):
            rec = self.click_record(i)
            clicks = "|".join(p.name + ("" if rec.gated[p] else "*") for p in sorted(rec.clicks))
            acc = "" if rec.accepted_bit is None else f"{BASIS_NAMES[rec.accepted_bit[0]]}:{rec.accepted_bit[1]}"
            w.writerow([rec.slot_index, BASIS_NAMES[self.alice_basis[i]], int(self.alice_bit[i]), clicks, acc])

    @classmethod
    def concat(cls, parts: list["LinkRecords"]) -> "LinkRecords":
        cat = np.concatenate
        return cls(
            cat([p.slot_index for p in parts]),
            cat([p.alice_basis for p in parts]),
            cat([p.alice_bit for p in parts]),
            cat([p.photons_sent for p in parts]),
            DetectionMasks(*(cat([getattr(p.masks, f) for p in parts])
                             for f in ("signal", "gated_signal", "dark", "accepted"))),
        )


def simulate_link(alice: AliceConfig, channel: ChannelConfig | list[ChannelConfig], bob: BobConfig, n_slots: int,
                  rng: np.random.Generator, pulse_period_ns: float | None = None,
                  batch_slots: int = 1 << 18) -> LinkRecords:
    """Run ``n_slots`` pulses through encoder, channel(s) and receiver."""
    bob.check_period(pulse_period_ns or alice.source.pulse_period_ns)
    channels = channel if isinstance(channel, list) else [channel]
    parts = []
    for start in range(0, n_slots, batch_slots):
        size = min(batch_slots, n_slots - start)
        emission = alice_emit(alice, size, rng, start_slot=start)
        photons = emission.photons
        sent = photons.photon_counts()
        for ch in channels:
            photons = channel_transmit(photons, ch, rng)
        masks = bob_detect_batch(photons, emission.prepared, bob, rng)
        parts.append(LinkRecords(np.arange(start, start + size), emission.basis, emission.bit,
                                 sent.astype(np.uint16), masks))
    if not parts:
        empty = np.zeros(0, dtype=np.uint8)
        return LinkRecords(np.zeros(0, dtype=np.int64), empty, empty, empty.astype(np.uint16),
                           DetectionMasks(empty, empty, empty, empty.astype(np.int8)))
    return parts[0] if len(parts) == 1 else LinkRecords.concat(parts)


# -- first-order analytic expectations of the simulation ---------------------

def _signal_probability(alice: AliceConfig, channel: ChannelConfig, bob: BobConfig, gated: bool) -> float:
    out = alice.output_source
    q = channel.transmittance * bob.detection_efficiency
    if gated and out.kind is SourceKind.SPP:
        q *= gate_fractions(bob.gate_width_ns, out.lifetime_ns, out.pulse_period_ns)[0]
    pmf = photon_number_pmf(out)
    n = np.arange(pmf.size)
    return float(1 - np.sum(pmf * (1 - q) ** n))


def expected_click_probabilities(alice: AliceConfig, channel: ChannelConfig, bob: BobConfig) -> dict[str, float]:
    """Per-slot probabilities: signal click (any time / in gate), dark click in gate, any gated click."""
    p_sig = _signal_probability(alice, channel, bob, gated=False)
    p_sig_gated = _signal_probability(alice, channel, bob, gated=True)
    p_dark = float(1 - np.prod(1 - bob.dark_probabilities()))
    return {
        "signal": p_sig,
        "signal_gated": p_sig_gated,
        "dark_gated": p_dark,
        "gated": 1 - (1 - p_sig_gated) * (1 - p_dark),
    }


def expected_qber(alice: AliceConfig, channel: ChannelConfig, bob: BobConfig) -> float:
    """QBER of sifted bits to first order: signal misalignment plus dark clicks at 50 % error."""
    p = expected_click_probabilities(alice, channel, bob)
    e_signal = _signal_error(alice.dynamic_error, bob)
    return (e_signal * p["signal_gated"] + 0.5 * p["dark_gated"]) / (p["signal_gated"] + p["dark_gated"])


def _signal_error(dynamic: float, bob: BobConfig) -> float:
    w = bob.hv_arm_probability
    per_basis = [e + dynamic - 2 * e * dynamic for e in (bob.pol_error_hv, bob.pol_error_lr)]
    return w * per_basis[0] + (1 - w) * per_basis[1]


def dynamic_error_for_qber(target: float, alice: AliceConfig, channel: ChannelConfig, bob: BobConfig) -> float:
    """Value of ``AliceConfig.dynamic_error`` that makes ``expected_qber`` equal ``target``."""
    p = expected_click_probabilities(alice, channel, bob)
    ps, pd = p["signal_gated"], p["dark_gated"]
    e_signal = (target * (ps + pd) - 0.5 * pd) / ps
    w = bob.hv_arm_probability
    base = _signal_error(0.0, bob)
    slope = 1 - 2 * (w * bob.pol_error_hv + (1 - w) * bob.pol_error_lr)
    dyn = (e_signal - base) / slope
    if not 0 <= dyn < 0.5:
        raise ValueError(f"target QBER {target} is not reachable with a dynamic error in [0, 0.5)")
    return dyn


def dark_fraction(bob: BobConfig, detected_rate: float, pulse_period_ns: float, lifetime_ns: float) -> float:
    """Gated dark counts relative to gated signal counts, from measured rates."""
    eta_g, beta_g = gate_fractions(bob.gate_width_ns, lifetime_ns, pulse_period_ns)
    return beta_g * sum(bob.dark_rates_hz.values()) / (eta_g * detected_rate)


def static_qber_estimate(p_dark: float, pol_error_hv: float, pol_error_lr: float) -> float:
    return (p_dark + pol_error_hv + pol_error_lr) / 2


def alice_output_rate(detected_rate: float, t_eom: float, control_efficiency: float) -> float:
    """Photons per second leaving the sender, from the control-APD count rate."""
    return detected_rate * t_eom / control_efficiency
